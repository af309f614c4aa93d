//! Adaptive-moment minibatch gradient descent over a flat parameter vector.

use crate::scalar::Scalar;

/// Adam with bias-corrected first/second moment estimates and optional
/// per-parameter learning-rate scaling (used to let the domain
/// discriminator adapt faster than the features it plays against).
pub struct Adam<F> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    m: Vec<F>,
    v: Vec<F>,
    lr_scale: Option<Vec<F>>,
    t: i32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            lr: F::of(lr),
            beta1: F::of(0.9),
            beta2: F::of(0.999),
            eps: F::of(1e-8),
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
            lr_scale: None,
            t: 0,
        }
    }

    /// Multiplies the learning rate for a coordinate range.
    pub fn scale_lr(&mut self, range: std::ops::Range<usize>, factor: f64) {
        let scale = self
            .lr_scale
            .get_or_insert_with(|| vec![F::one(); self.m.len()]);
        for s in &mut scale[range] {
            *s = *s * F::of(factor);
        }
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1c = F::one() - self.beta1.powi(self.t);
        let b2c = F::one() - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (F::one() - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (F::one() - self.beta2) * g * g;
            let m_hat = self.m[i] / b1c;
            let v_hat = self.v[i] / b2c;
            let lr = match &self.lr_scale {
                Some(s) => self.lr * s[i],
                None => self.lr,
            };
            params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (x - 3)^2
        let mut x = vec![0.0f64];
        let mut opt = Adam::new(0.1, 1);
        for _ in 0..500 {
            let g = 2.0 * (x[0] - 3.0);
            opt.step(&mut x, &[g]);
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "x = {}", x[0]);
    }
}
