//! Adaptive moment estimation with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates of one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
}

impl Moments {
    pub fn zeros_like(p: &Matrix) -> Self {
        Self {
            m: Matrix::zeros(p.rows(), p.cols()),
            v: Matrix::zeros(p.rows(), p.cols()),
        }
    }
}

/// One update of `param` in place. `t` is the 1-based step number used for
/// bias correction. Decay shrinks the parameter by `lr·wd` before the
/// adaptive step and never enters the moments.
pub fn adamw_step(
    param: &mut Matrix,
    grad: &Matrix,
    moments: &mut Moments,
    t: u64,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::parameter("optimizer step numbers start at 1"));
    }
    param.ensure_same_shape(grad, "adamw gradient")?;
    param.ensure_same_shape(&moments.m, "adamw first moment")?;
    param.ensure_same_shape(&moments.v, "adamw second moment")?;
    let bc1 = 1.0 - BETA1.powf(t as f64);
    let bc2 = 1.0 - BETA2.powf(t as f64);
    let decay = 1.0 - lr * weight_decay;
    let m = moments.m.data_mut();
    let v = moments.v.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p * decay - lr * m_hat / (v_hat.sqrt() + EPS);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = Matrix::from_rows(&[&[0.3, -1.2], &[2.0, 0.0]]);
        let before = p.clone();
        let mut mo = Moments::zeros_like(&p);
        for t in 1..=5 {
            adamw_step(&mut p, &Matrix::zeros(2, 2), &mut mo, t, 0.1, 0.0).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = Matrix::scalar(0.0);
        let mut mo = Moments::zeros_like(&p);
        adamw_step(&mut p, &Matrix::scalar(1.0), &mut mo, 1, 0.1, 0.0).unwrap();
        let want = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.item() - want).abs() < 1e-15, "{}", p.item());
    }

    #[test]
    fn decay_alone_contracts() {
        let mut p = Matrix::from_rows(&[&[1.0, -2.0, 3.0]]);
        let mut mo = Moments::zeros_like(&p);
        let mut last = p.frobenius_sq();
        for t in 1..=10 {
            adamw_step(&mut p, &Matrix::zeros(1, 3), &mut mo, t, 0.1, 0.5).unwrap();
            let now = p.frobenius_sq();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn shape_and_step_checks() {
        let mut p = Matrix::zeros(2, 2);
        let mut mo = Moments::zeros_like(&p);
        assert!(adamw_step(&mut p, &Matrix::zeros(1, 2), &mut mo, 1, 0.1, 0.0).is_err());
        assert!(adamw_step(&mut p, &Matrix::zeros(2, 2), &mut mo, 0, 0.1, 0.0).is_err());
    }
}
