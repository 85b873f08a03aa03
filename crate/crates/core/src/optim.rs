//! First-order optimizer shared by the solvers.

/// Adam with per-parameter base step sizes.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-12,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Updates the moment estimates with `grad` and returns the step to add
    /// to the parameters, `scale · lr_i · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, grad: &[f64], lrs: &[f64], scale: f64) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let mut delta = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            delta[i] = -scale * lrs[i] * m_hat / (v_hat.sqrt() + self.eps);
        }
        delta
    }
}

/// Cosine decay from 1 to `floor` over `total` iterations.
pub(crate) fn cosine_factor(iter: usize, total: usize, floor: f64) -> f64 {
    if total <= 1 {
        return 1.0;
    }
    let x = iter as f64 / (total - 1) as f64;
    floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(2);
        for i in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            let d = adam.step(&g, &[0.05, 0.05], cosine_factor(i, 2000, 0.0));
            for (xi, di) in x.iter_mut().zip(d) {
                *xi += di;
            }
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_factor(0, 10, 0.1), 1.0);
        assert!((cosine_factor(9, 10, 0.1) - 0.1).abs() < 1e-15);
    }
}
