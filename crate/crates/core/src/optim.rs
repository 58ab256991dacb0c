//! Adam with bias correction, over a fixed roster of parameter slots.

use crate::scalar::Scalar;

pub struct Adam<S: Scalar> {
    beta1: S,
    beta2: S,
    stabilizer: S,
    t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(beta1: f64, beta2: f64, stabilizer: f64, slot_sizes: &[usize]) -> Self {
        Adam {
            beta1: S::of(beta1),
            beta2: S::of(beta2),
            stabilizer: S::of(stabilizer),
            t: 0,
            m: slot_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: slot_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    pub fn single(size: usize, beta1: f64, beta2: f64, stabilizer: f64) -> Self {
        Self::new(beta1, beta2, stabilizer, &[size])
    }

    /// One update over all slots. `params` and `grads` must match the
    /// slot roster given at construction.
    pub fn step(&mut self, lr: S, params: &mut [Vec<S>], grads: &[Vec<S>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let one = S::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for slot in 0..params.len() {
            let (p, g) = (&mut params[slot], &grads[slot]);
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (one - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (one - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + self.stabilizer);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut adam = Adam::<f64>::single(3, 0.9, 0.999, 1e-8);
        let mut p = vec![vec![1.0, -2.0, 3.0]];
        let before = p[0].clone();
        adam.step(0.0, &mut p, &[vec![0.5, -0.5, 4.0]]);
        assert_eq!(p[0], before);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // with bias correction the first update is lr * sign(g)
        let mut adam = Adam::<f64>::single(1, 0.9, 0.999, 1e-8);
        let mut p = vec![vec![0.0]];
        adam.step(0.1, &mut p, &[vec![42.0]]);
        assert!((p[0][0] + 0.1).abs() < 1e-6, "{}", p[0][0]);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut adam = Adam::<f64>::single(1, 0.9, 0.999, 1e-8);
        let mut p = vec![vec![5.0]];
        for _ in 0..500 {
            let g = 2.0 * p[0][0];
            adam.step(0.05, &mut p, &[vec![g]]);
        }
        assert!(p[0][0].abs() < 0.1, "{}", p[0][0]);
    }
}
