//! Adam optimizer with optional L2 weight decay (added to the gradient).

use ndarray::ArrayD;

use crate::param::Param;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update. The parameter list must be the same (order and
    /// shapes) on every call.
    pub fn step(&mut self, params: &mut [(String, &mut Param)]) {
        if self.m.is_empty() {
            for (_, p) in params.iter() {
                self.m.push(ArrayD::zeros(p.value.raw_dim()));
                self.v.push(ArrayD::zeros(p.value.raw_dim()));
            }
        }
        assert_eq!(self.m.len(), params.len(), "optimizer/parameter mismatch");
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (((mv, vv), g), w) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(p.grad.iter())
                .zip(p.value.iter_mut())
            {
                let g = g + self.weight_decay * *w;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * g;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                let mh = *mv / b1t;
                let vh = *vv / b2t;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Moment tensors for checkpointing, named after their parameters.
    pub fn state_tensors(&self, names: &[String]) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        for (i, n) in names.iter().enumerate() {
            if i < self.m.len() {
                out.push((format!("adam.m.{n}"), self.m[i].clone()));
                out.push((format!("adam.v.{n}"), self.v[i].clone()));
            }
        }
        out
    }

    pub fn load_state(
        &mut self,
        names: &[String],
        tensors: &std::collections::HashMap<String, ArrayD<f64>>,
    ) {
        self.m.clear();
        self.v.clear();
        for n in names {
            if let (Some(m), Some(v)) =
                (tensors.get(&format!("adam.m.{n}")), tensors.get(&format!("adam.v.{n}")))
            {
                self.m.push(m.clone());
                self.v.push(v.clone());
            } else {
                self.m.clear();
                self.v.clear();
                return;
            }
        }
    }
}
