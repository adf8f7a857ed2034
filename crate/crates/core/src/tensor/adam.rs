use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Adam moments for every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One bias-corrected Adam update with decoupled weight decay
    /// (`param -= lr * wd * param`).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        if grads.len() != names.len() {
            return Err(TensorError::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                names.len()
            )));
        }
        for (name, g) in names.iter().zip(grads) {
            match g {
                None => return Err(TensorError::MissingGrad(name.clone())),
                Some(g) if !g.is_finite() => return Err(TensorError::NonFinite { op: "gradient" }),
                Some(_) => {}
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, param) in params.tensors_mut().enumerate() {
            let g = grads[i].as_ref().expect("checked above");
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, p) in param.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= lr * weight_decay * *p;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[2], v));
        s
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let mut p = store(1.5);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamState::new(&p, cfg);
        st.step(&mut p, &[Some(Tensor::zeros(&[2]))], 0.1).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.5, 1.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_is_a_unit_step() {
        let mut p = store(0.0);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamState::new(&p, cfg);
        st.step(&mut p, &[Some(Tensor::full(&[2], 1.0))], 0.1).unwrap();
        // mhat = 1, vhat = 1, update = -0.1 / (1 + 1e-8)
        let want = -0.1 / (1.0 + 1e-8);
        for v in p.get("w").unwrap().data() {
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_only_scales_parameters() {
        let mut p = store(2.0);
        let cfg = AdamConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut st = AdamState::new(&p, cfg);
        st.step(&mut p, &[Some(Tensor::zeros(&[2]))], 0.5).unwrap();
        for v in p.get("w").unwrap().data() {
            assert!((v - 2.0 * (1.0 - 0.5 * 0.01)).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = store(1.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        assert_eq!(st.step(&mut p, &[None], 0.1), Err(TensorError::MissingGrad("w".into())));
        assert_eq!(st.step, 0);
    }
}
