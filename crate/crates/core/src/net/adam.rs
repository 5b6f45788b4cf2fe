use crate::error::{check_dim, Error, Result};

use super::{Grad, VelocityNet};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(param_count: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Bias-corrected Adam update applied in place. A non-finite gradient is rejected before
    /// anything is modified.
    pub fn step(&mut self, net: &mut VelocityNet, grad: &Grad, lr: f64) -> Result<()> {
        check_dim("adam step", self.m.len(), grad.len())?;
        check_dim("adam step", net.param_count(), grad.len())?;
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let params = net.params_mut();
        for (((p, m), v), g) in params
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
            .zip(&grad.0)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Arch;
    use ndarray::Array2;

    fn net() -> VelocityNet {
        VelocityNet::init(
            Arch {
                dim: 1,
                hidden: vec![6],
                num_classes: 1,
                embed_dim: 2,
                time_features: 4,
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_fresh_params() {
        let mut n = net();
        let before = n.params().to_vec();
        let mut opt = Adam::new(n.param_count());
        let g = Grad::zeros(n.param_count());
        opt.step(&mut n, &g, 1e-2).unwrap();
        assert_eq!(n.params(), &before[..]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut n = net();
        let before = n.params().to_vec();
        let mut opt = Adam::new(n.param_count());
        let mut g = Grad::zeros(n.param_count());
        g.0[3] = f64::NAN;
        assert!(matches!(opt.step(&mut n, &g, 1e-2), Err(Error::NonFiniteGradient)));
        assert_eq!(n.params(), &before[..]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn one_step_reduces_quadratic_loss() {
        let mut n = net();
        let x = Array2::from_shape_vec((3, 1), vec![-1.0, 0.2, 0.9]).unwrap();
        let t = [0.2, 0.5, 0.8];
        let c = [0, 0, 0];
        let loss = |n: &VelocityNet| n.forward(x.view(), &t, &c).unwrap().mapv(|v| v * v).sum();
        let before = loss(&n);
        let (out, rec) = n.forward_record(x.view(), &t, &c).unwrap();
        let g = n.backward(&rec, (&out * 2.0).view()).unwrap();
        let mut opt = Adam::new(n.param_count());
        opt.step(&mut n, &g, 1e-4).unwrap();
        assert!(loss(&n) < before);
    }

    #[test]
    fn deterministic_given_state() {
        let mut a = net();
        let mut b = net();
        let g = Grad((0..a.param_count()).map(|i| (i as f64).sin()).collect());
        let mut oa = Adam::new(a.param_count());
        let mut ob = oa.clone();
        for _ in 0..3 {
            oa.step(&mut a, &g, 1e-3).unwrap();
            ob.step(&mut b, &g, 1e-3).unwrap();
        }
        assert_eq!(a.params(), b.params());
        assert_eq!(oa, ob);
    }
}
