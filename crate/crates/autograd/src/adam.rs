//! Adam optimizer over flat parameter arrays.

/// First/second moment buffers and step counter for one parameter array.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One in-place Adam update with bias correction.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) {
    assert_eq!(params.len(), grads.len(), "adam_step: length mismatch");
    assert_eq!(params.len(), state.m.len(), "adam_step: stale state");
    let (b1, b2) = betas;
    state.step += 1;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![1.5, -0.25];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1, (0.9, 0.999), 1e-8);
        assert_eq!(p, vec![1.5, -0.25]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // With g = 1 the bias-corrected update is lr * 1 / (1 + eps).
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, 0.1, (0.9, 0.999), 1e-8);
        assert!((p[0] + 0.1).abs() < 1e-6, "got {}", p[0]);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(x) = x^2 from x = 1; |x| < 0.1 after 100 steps.
        let mut x = vec![1.0];
        let mut st = AdamState::new(1);
        for _ in 0..100 {
            let g = 2.0 * x[0];
            adam_step(&mut x, &[g], &mut st, 0.05, (0.9, 0.999), 1e-8);
        }
        assert!(x[0].abs() < 0.1, "x = {}", x[0]);
    }
}
