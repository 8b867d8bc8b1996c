//! Adam with bias-corrected moment estimates.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Ascent,
    Descent,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self::with_betas(dim, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(dim: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], direction: Direction) {
        assert_eq!(params.len(), self.m.len(), "adam: parameter dimension changed");
        assert_eq!(grad.len(), self.m.len(), "adam: gradient dimension mismatch");
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let sign = match direction {
            Direction::Ascent => 1.0,
            Direction::Descent => -1.0,
        };
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] += sign * self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = [0.3, -4.0, 1e-3];
        let mut opt = Adam::new(3, 0.01);
        opt.step(&mut p, &g, Direction::Descent);
        let deltas = [p[0] - 1.0, p[1] + 2.0, p[2] - 0.5];
        for (d, gi) in deltas.iter().zip(g) {
            assert!((d + 0.01 * gi.signum()).abs() < 1e-6, "{d}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, 2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..5 {
            opt.step(&mut p, &[0.0, 0.0], Direction::Ascent);
        }
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn constant_gradient_updates_do_not_grow() {
        let mut p = vec![0.0];
        let mut opt = Adam::new(1, 0.01);
        opt.step(&mut p, &[2.0], Direction::Ascent);
        let first = p[0];
        opt.step(&mut p, &[2.0], Direction::Ascent);
        let second = p[0] - first;
        assert!(second <= first + 1e-12);
    }
}
