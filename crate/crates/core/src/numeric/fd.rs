//! Central finite differences over a [`ParamSet`], the independent oracle
//! every analytic gradient in the repo is checked against.

use crate::error::Result;
use crate::numeric::{ParamSet, Tensor};

/// Default step; balances truncation and round-off at f64.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / (2h)` for every
/// trainable coordinate. The objective must be deterministic. Returns
/// `(name, gradient)` pairs in declaration order; frozen parameters get
/// zero gradients.
pub fn finite_difference_grad<F>(
    mut objective: F,
    params: &ParamSet,
    h: f64,
) -> Result<Vec<(String, Tensor)>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for p in params.iter() {
        let mut grad = vec![0.0; p.value.numel()];
        if p.trainable {
            for i in 0..p.value.numel() {
                let base = p.value.data()[i];

                let mut plus = p.value.clone();
                plus.data_mut()[i] = base + h;
                work.set_value(&p.name, plus)?;
                let f_plus = objective(&work)?;

                let mut minus = p.value.clone();
                minus.data_mut()[i] = base - h;
                work.set_value(&p.name, minus)?;
                let f_minus = objective(&work)?;

                work.set_value(&p.name, p.value.clone())?;
                grad[i] = (f_plus - f_minus) / (2.0 * h);
            }
        }
        out.push((
            p.name.clone(),
            Tensor::new(p.value.shape().to_vec(), grad)?,
        ));
    }
    Ok(out)
}

/// Max relative error between an analytic gradient and the FD oracle:
/// `|a - f| / max(1, |a|, |f|)` over all coordinates.
pub fn max_relative_error(analytic: &[(String, Tensor)], fd: &[(String, Tensor)]) -> f64 {
    let mut worst: f64 = 0.0;
    for ((an, at), (fn_, ft)) in analytic.iter().zip(fd) {
        assert_eq!(an, fn_, "gradient name order mismatch");
        for (&a, &f) in at.data().iter().zip(ft.data()) {
            let denom = a.abs().max(f.abs()).max(1.0);
            worst = worst.max((a - f).abs() / denom);
        }
    }
    worst
}
