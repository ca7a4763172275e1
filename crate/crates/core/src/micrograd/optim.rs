//! SGD with momentum, optional global-norm gradient clipping, and the
//! exponential-moving-average update used for the teacher weights.

use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{CoreError, Result};

/// Per-parameter velocity buffers keyed by parameter name.
#[derive(Default)]
pub struct SgdState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> SgdState {
        SgdState::default()
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(|v| v.as_slice())
    }
}

/// One SGD-with-momentum step over named parameters:
/// `v <- momentum * v + g;  w <- w - lr * v`.
///
/// A missing gradient counts as zero. Any non-finite gradient aborts the step
/// before any parameter is touched. When `clip_norm` is set and the global L2
/// norm of all gradients exceeds it, every gradient is scaled down to that
/// norm first.
pub fn sgd_momentum_step(
    params: &[(String, Tensor)],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    clip_norm: Option<f64>,
) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) || !(momentum.is_finite() && (0.0..1.0).contains(&momentum)) {
        return Err(CoreError::Config(format!(
            "sgd: bad lr {lr} or momentum {momentum}"
        )));
    }
    let grads: Vec<Option<Vec<f64>>> = params.iter().map(|(_, t)| t.grad()).collect();
    for ((name, _), g) in params.iter().zip(&grads) {
        if let Some(g) = g {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(CoreError::TrainAbort(format!(
                    "non-finite gradient in parameter '{name}'"
                )));
            }
        }
    }
    let scale = match clip_norm {
        Some(maxn) => {
            if !(maxn.is_finite() && maxn > 0.0) {
                return Err(CoreError::Config(format!("sgd: bad clip norm {maxn}")));
            }
            let sq: f64 = grads
                .iter()
                .flatten()
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                .sum();
            let norm = sq.sqrt();
            if norm > maxn {
                maxn / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for ((name, tensor), grad) in params.iter().zip(&grads) {
        let n = tensor.numel();
        let vel = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; n]);
        if vel.len() != n {
            return Err(CoreError::Shape(format!(
                "sgd: velocity length {} != parameter '{name}' numel {n}",
                vel.len()
            )));
        }
        let mut data = tensor.data_mut();
        match grad {
            Some(g) => {
                for i in 0..n {
                    vel[i] = momentum * vel[i] + g[i] * scale;
                    data[i] -= lr * vel[i];
                }
            }
            None => {
                for i in 0..n {
                    vel[i] *= momentum;
                    data[i] -= lr * vel[i];
                }
            }
        }
    }
    Ok(())
}

/// In-place EMA: `t <- alpha * t + (1 - alpha) * s` for every parameter pair.
/// The two lists must align by name and shape.
pub fn ema_update(
    teacher: &[(String, Tensor)],
    student: &[(String, Tensor)],
    alpha: f64,
) -> Result<()> {
    if !(alpha.is_finite() && (0.0..=1.0).contains(&alpha)) {
        return Err(CoreError::Config(format!("ema: bad alpha {alpha}")));
    }
    if teacher.len() != student.len() {
        return Err(CoreError::Shape(format!(
            "ema: {} teacher params vs {} student params",
            teacher.len(),
            student.len()
        )));
    }
    for ((tn, tt), (sn, st)) in teacher.iter().zip(student) {
        if tn != sn {
            return Err(CoreError::Shape(format!("ema: name mismatch '{tn}' vs '{sn}'")));
        }
        if tt.numel() != st.numel() {
            return Err(CoreError::Shape(format!("ema: shape mismatch in '{tn}'")));
        }
        let sd = st.data();
        let mut td = tt.data_mut();
        for (t, s) in td.iter_mut().zip(&sd) {
            *t = alpha * *t + (1.0 - alpha) * *s;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Three hand-computed SGD steps with momentum 0.9, lr 0.1, constant
    /// gradient 1 from w = 0:
    ///   v1 = 1,    w1 = -0.1
    ///   v2 = 1.9,  w2 = -0.29
    ///   v3 = 2.71, w3 = -0.561
    #[test]
    fn sgd_three_steps_closed_form() {
        let w = Tensor::new(&[1], vec![0.0], true).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let mut state = SgdState::new();
        let expected = [-0.1, -0.29, -0.561];
        for e in expected {
            w.with_grad_mut(|g| g[0] = 1.0);
            sgd_momentum_step(&params, &mut state, 0.1, 0.9, None).unwrap();
            w.clear_grad();
            assert!((w.value() - e).abs() < 1e-12, "{} vs {e}", w.value());
        }
    }

    #[test]
    fn sgd_missing_grad_only_decays_velocity() {
        let w = Tensor::new(&[1], vec![1.0], true).unwrap();
        let params = vec![("w".to_string(), w.clone())];
        let mut state = SgdState::new();
        // Never any gradient: velocity stays zero, weight never moves.
        for _ in 0..5 {
            sgd_momentum_step(&params, &mut state, 0.1, 0.9, None).unwrap();
        }
        assert_eq!(w.value(), 1.0);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient_without_mutation() {
        let w = Tensor::new(&[2], vec![1.0, 2.0], true).unwrap();
        w.with_grad_mut(|g| {
            g[0] = f64::NAN;
            g[1] = 1.0;
        });
        let params = vec![("w".to_string(), w.clone())];
        let mut state = SgdState::new();
        assert!(sgd_momentum_step(&params, &mut state, 0.1, 0.9, None).is_err());
        assert_eq!(w.data(), vec![1.0, 2.0]);
    }

    #[test]
    fn clip_rescales_to_requested_norm() {
        let w = Tensor::new(&[2], vec![0.0, 0.0], true).unwrap();
        w.with_grad_mut(|g| {
            g[0] = 3.0;
            g[1] = 4.0;
        });
        let params = vec![("w".to_string(), w.clone())];
        let mut state = SgdState::new();
        sgd_momentum_step(&params, &mut state, 1.0, 0.0, Some(1.0)).unwrap();
        // Gradient norm 5 clipped to 1 -> step is -(3/5, 4/5).
        let d = w.data();
        assert!((d[0] + 0.6).abs() < 1e-12);
        assert!((d[1] + 0.8).abs() < 1e-12);
    }

    /// After n EMA steps against a constant student w, a teacher starting at
    /// t0 sits at w + alpha^n (t0 - w).
    #[test]
    fn ema_matches_closed_form_over_fifty_steps() {
        let alpha = 0.9996;
        let t = Tensor::new(&[1], vec![2.0], false).unwrap();
        let s = Tensor::new(&[1], vec![1.0], false).unwrap();
        let tp = vec![("w".to_string(), t.clone())];
        let sp = vec![("w".to_string(), s.clone())];
        for _ in 0..50 {
            ema_update(&tp, &sp, alpha).unwrap();
        }
        let expect = 1.0 + alpha_pow(alpha, 50) * (2.0 - 1.0);
        assert!((t.value() - expect).abs() < 1e-12);
    }

    fn alpha_pow(a: f64, n: u32) -> f64 {
        (0..n).fold(1.0, |acc, _| acc * a)
    }

    #[test]
    fn ema_rejects_misaligned_names() {
        let t = Tensor::new(&[1], vec![0.0], false).unwrap();
        let s = Tensor::new(&[1], vec![0.0], false).unwrap();
        let tp = vec![("a".to_string(), t)];
        let sp = vec![("b".to_string(), s)];
        assert!(ema_update(&tp, &sp, 0.5).is_err());
    }
}
