use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `params`.
///
/// Each coordinate is perturbed by `±h` in turn; `f` must be pure.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Domain {
            op: "finite_diff_grad",
            message: format!("step must be positive, got {h}"),
        });
    }
    let mut point: Vec<Tensor> = params.iter().map(Tensor::detach).collect();
    let mut grads = Vec::with_capacity(params.len());
    for t in 0..point.len() {
        let base = point[t].data().to_vec();
        let mut g = vec![0.0; base.len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut plus = base.clone();
            plus[i] += h;
            point[t] = Tensor::new(params[t].shape().to_vec(), plus);
            let up = f(&point)?;
            let mut minus = base.clone();
            minus[i] -= h;
            point[t] = Tensor::new(params[t].shape().to_vec(), minus);
            let down = f(&point)?;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite_diff_grad: tensor {t} coordinate {i}"
                )));
            }
            *gi = (up - down) / (2.0 * h);
        }
        point[t] = Tensor::new(params[t].shape().to_vec(), base);
        grads.push(Tensor::new(params[t].shape().to_vec(), g));
    }
    Ok(grads)
}

/// Worst-coordinate comparison between an analytic and a numeric gradient.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Largest `|a - n| / max(|a|, |n|)` over coordinates above the floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of coordinates outside tolerance.
    pub violations: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// A coordinate passes when `|a - n| <= rel * max(|a|, |n|)` or `|a - n| <= abs_floor`.
pub fn check_gradients(
    analytic: &[Tensor],
    numeric: &[Tensor],
    rel: f64,
    abs_floor: f64,
) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len());
    let mut out = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        violations: 0,
    };
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let diff = (x - y).abs();
            let scale = x.abs().max(y.abs());
            out.max_abs_err = out.max_abs_err.max(diff);
            if diff > abs_floor {
                out.max_rel_err = out.max_rel_err.max(diff / scale);
                if diff > rel * scale {
                    out.violations += 1;
                }
            }
        }
    }
    out
}
