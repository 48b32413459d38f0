//! Per-group first-order update rules.
//!
//! The deformation estimator uses gradient-RMS scaling (an exponential
//! average of squared gradients divides the step); the blur remover adds a
//! first-moment accumulator with bias correction on top of the RMS term.
//! The RMS accumulator is seeded from the first gradient so early steps are
//! not amplified by an empty average.

/// Gradient-RMS scaling: `v <- a v + (1-a) g^2`, `p <- p - lr g / (sqrt(v) + eps)`.
#[derive(Debug, Clone)]
pub struct GradientRms {
    pub v: Vec<f64>,
    pub alpha: f64,
    pub eps: f64,
    pub warm: bool,
}

impl GradientRms {
    pub fn new(len: usize) -> Self {
        Self {
            v: vec![0.0; len],
            alpha: 0.99,
            eps: 1e-8,
            warm: false,
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[f64], lr: f64) {
        debug_assert_eq!(self.v.len(), grads.len());
        if !self.warm {
            for (v, g) in self.v.iter_mut().zip(grads.iter()) {
                *v = g * g;
            }
            self.warm = true;
        }
        let mut i = 0;
        for block in params.iter_mut() {
            for p in block.iter_mut() {
                let g = grads[i];
                self.v[i] = self.alpha * self.v[i] + (1.0 - self.alpha) * g * g;
                *p -= lr * g / (self.v[i].sqrt() + self.eps);
                i += 1;
            }
        }
        debug_assert_eq!(i, grads.len());
    }
}

/// RMS plus momentum with bias correction.
#[derive(Debug, Clone)]
pub struct RmsMomentum {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl RmsMomentum {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[f64], lr: f64) {
        debug_assert_eq!(self.v.len(), grads.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut i = 0;
        for block in params.iter_mut() {
            for p in block.iter_mut() {
                let g = grads[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = self.m[i] / c1;
                let vhat = self.v[i] / c2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
                i += 1;
            }
        }
        debug_assert_eq!(i, grads.len());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rms_first_step_is_at_most_lr_scale() {
        let mut opt = GradientRms::new(2);
        let mut a = [1.0, 1.0];
        let (left, right) = a.split_at_mut(1);
        let mut blocks: Vec<&mut [f64]> = vec![left, right];
        opt.step(&mut blocks, &[10.0, -0.001], 0.01);
        // both steps are lr-sized regardless of the gradient scale
        assert!((a[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((a[1] - (1.0 + 0.01)).abs() < 1e-9);
    }

    #[test]
    fn momentum_descends_a_quadratic() {
        let mut opt = RmsMomentum::new(1);
        let mut x = [3.0f64];
        for _ in 0..2000 {
            let g = 2.0 * x[0];
            let mut blocks: Vec<&mut [f64]> = vec![&mut x];
            opt.step(&mut blocks, &[g], 0.01);
        }
        assert!(x[0].abs() < 1e-2, "{}", x[0]);
    }
}
