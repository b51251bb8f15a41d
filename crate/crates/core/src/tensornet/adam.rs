use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Hyperparameters of the decoupled-weight-decay Adam update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::param("eps must be > 0 and weight decay >= 0"));
        }
        Ok(())
    }
}

/// Moment buffers and step counter for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one AdamW update in place:
    /// `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::dim(format!("parameter {i} changed shape")));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= c.lr * c.weight_decay * *w;
                *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(no_decay(1e-3), &[&p]).unwrap();
        for _ in 0..5 {
            st.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = lr / (1 + ε).
        let lr = 0.01;
        let mut p = Tensor::scalar(2.0);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::new(no_decay(lr), &[&p]).unwrap();
        st.step(&mut [&mut p], &[&g]).unwrap();
        let expected = 2.0 - lr / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let init = Tensor::new(vec![2], vec![0.3, 0.4]).unwrap();
        let g = Tensor::new(vec![2], vec![0.1, -0.7]).unwrap();
        let (mut a, mut b) = (init.clone(), init);
        let mut sa = AdamState::new(AdamConfig::default(), &[&a]).unwrap();
        let mut sb = sa.clone();
        for _ in 0..3 {
            sa.step(&mut [&mut a], &[&g]).unwrap();
            sb.step(&mut [&mut b], &[&g]).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn shape_change_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new(AdamConfig::default(), &[&p]).unwrap();
        let g = Tensor::zeros(&[3]);
        assert!(matches!(st.step(&mut [&mut p], &[&g]), Err(Error::Dimension(_))));
    }

    #[test]
    fn negative_lr_is_rejected() {
        let p = Tensor::zeros(&[1]);
        assert!(AdamState::new(no_decay(-1.0), &[&p]).is_err());
    }
}
