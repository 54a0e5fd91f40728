use crate::params::ModelParams;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ModelParams,
    v: ModelParams,
    t: u64,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let tensors = params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                let grad = gk + self.weight_decay * p[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * grad;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * grad * grad;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
