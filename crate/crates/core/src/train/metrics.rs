use crate::autodiff::IGNORE;
use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// `|pred ∧ target| / |pred ∨ target|` over the `1` pixels; `1.0` when both
/// are empty. Pixels the target marks [`IGNORE`] do not count.
pub fn positive_iu(pred: &LabelMap, target: &LabelMap) -> Result<f64> {
    if pred.size() != target.size() {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", pred.size(), target.size())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        if t == IGNORE {
            continue;
        }
        let (p, t) = (p == 1, t == 1);
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean and population standard deviation; `(NaN, NaN)` for no values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (mean, variance(values).sqrt())
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Middle value, or the mean of the two middle values.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}
