use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Method {
    pub fn adam() -> Self {
        Method::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawOptim", into = "RawOptim")]
pub struct OptimConfig {
    pub lr: f64,
    pub method: Method,
}

/// Flat JSON form: `{"lr": .., "method": "adam"|"sgd", "beta1": .., "beta2": .., "eps": ..}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptim {
    #[serde(default)]
    lr: Option<f64>,
    #[serde(default)]
    method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
}

impl TryFrom<RawOptim> for OptimConfig {
    type Error = String;

    fn try_from(r: RawOptim) -> std::result::Result<Self, String> {
        let d = OptimConfig::default();
        let lr = r.lr.unwrap_or(d.lr);
        let method = match r.method.as_deref().unwrap_or("adam") {
            "sgd" => {
                if r.beta1.is_some() || r.beta2.is_some() || r.eps.is_some() {
                    return Err("beta1/beta2/eps only apply to adam".into());
                }
                Method::Sgd
            }
            "adam" => {
                let Method::Adam { beta1, beta2, eps } = Method::adam() else { unreachable!() };
                Method::Adam {
                    beta1: r.beta1.unwrap_or(beta1),
                    beta2: r.beta2.unwrap_or(beta2),
                    eps: r.eps.unwrap_or(eps),
                }
            }
            other => return Err(format!("unknown optimizer {other:?}; expected adam or sgd")),
        };
        Ok(OptimConfig { lr, method })
    }
}

impl From<OptimConfig> for RawOptim {
    fn from(c: OptimConfig) -> Self {
        match c.method {
            Method::Sgd => RawOptim { lr: Some(c.lr), method: Some("sgd".into()), beta1: None, beta2: None, eps: None },
            Method::Adam { beta1, beta2, eps } => RawOptim {
                lr: Some(c.lr),
                method: Some("adam".into()),
                beta1: Some(beta1),
                beta2: Some(beta2),
                eps: Some(eps),
            },
        }
    }
}

impl OptimConfig {
    /// Checks the learning rate and moment coefficients.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Input(format!("lr: must be positive, got {}", self.lr)));
        }
        if let Method::Adam { beta1, beta2, eps } = self.method {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
                return Err(Error::Input("beta1/beta2: must lie in [0, 1)".into()));
            }
            if !(eps.is_finite() && eps > 0.0) {
                return Err(Error::Input("eps: must be positive".into()));
            }
        }
        Ok(())
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-3, method: Method::adam() }
    }
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        Self { lr, method: Method::Sgd }
    }

    pub fn adam(lr: f64) -> Self {
        Self { lr, method: Method::adam() }
    }
}

/// First-order optimizer holding per-parameter moment estimates.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimConfig, store: &ParamStore) -> Self {
        let (first, second) = match config.method {
            Method::Sgd => (Vec::new(), Vec::new()),
            Method::Adam { .. } => {
                let z: Vec<Matrix> = store
                    .params()
                    .iter()
                    .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                    .collect();
                (z.clone(), z)
            }
        };
        Self { config, first, second, t: 0 }
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    /// Applies one update from the accumulated gradients, increments the
    /// store's step counter, then zeroes all gradients. Fails without
    /// touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for p in store.params() {
            if !p.grad.is_finite() {
                return Err(Error::Diverged(format!("gradient of {}", p.name)));
            }
        }
        self.t += 1;
        let lr = self.config.lr;
        match self.config.method {
            Method::Sgd => {
                for p in store.params_mut().iter_mut().filter(|p| !p.frozen) {
                    for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= lr * g;
                    }
                }
            }
            Method::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (k, p) in store.params_mut().iter_mut().enumerate() {
                    if p.frozen {
                        continue;
                    }
                    let m = self.first[k].data_mut();
                    let v = self.second[k].data_mut();
                    for (((w, &g), mi), vi) in
                        p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v)
                    {
                        if g == 0.0 && *mi == 0.0 && *vi == 0.0 {
                            continue;
                        }
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        store.bump_step();
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore, super::super::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Matrix::column(vec![v]));
        (s, id)
    }

    #[test]
    fn sgd_single_step() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Optimizer::new(OptimConfig::sgd(0.1), &s);
        s.grad_mut(id).data_mut()[0] = 1.0;
        opt.step(&mut s).unwrap();
        assert!((s.value(id).data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(s.step(), 1);
        assert_eq!(s.grad(id).data()[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for cfg in [OptimConfig::sgd(0.1), OptimConfig::adam(0.1)] {
            let (mut s, id) = scalar_store(2.5);
            let mut opt = Optimizer::new(cfg, &s);
            opt.step(&mut s).unwrap();
            assert_eq!(s.value(id).data()[0], 2.5);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let (mut s, id) = scalar_store(5.0);
        let mut opt = Optimizer::new(OptimConfig::adam(0.1), &s);
        for _ in 0..500 {
            let w = s.value(id).data()[0];
            s.grad_mut(id).data_mut()[0] = 2.0 * w;
            opt.step(&mut s).unwrap();
        }
        assert!(s.value(id).data()[0].abs() < 0.1);
    }

    #[test]
    fn adam_matches_reference_recurrence() {
        // Reference recurrence written out for a scalar.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let (mut w, mut m, mut v) = (5.0f64, 0.0f64, 0.0f64);
        for t in 1..=500 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        let (mut s, id) = scalar_store(5.0);
        let mut opt = Optimizer::new(OptimConfig::adam(lr), &s);
        for _ in 0..500 {
            let x = s.value(id).data()[0];
            s.grad_mut(id).data_mut()[0] = 2.0 * x;
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.value(id).data()[0], w);
        assert!(w.abs() < 0.1);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = Optimizer::new(OptimConfig::default(), &s);
        s.grad_mut(id).data_mut()[0] = f64::NAN;
        match opt.step(&mut s) {
            Err(Error::Diverged(msg)) => assert!(msg.contains('w')),
            other => panic!("expected divergence, got {other:?}"),
        }
        assert_eq!(s.value(id).data()[0], 1.0);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let (mut s, id) = scalar_store(1.0);
        s.set_frozen(id, true);
        let mut opt = Optimizer::new(OptimConfig::sgd(0.5), &s);
        s.grad_mut(id).data_mut()[0] = 1.0;
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id).data()[0], 1.0);
    }

    #[test]
    fn config_json_forms() {
        let c: OptimConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, OptimConfig::default());
        let c: OptimConfig = serde_json::from_str(r#"{"lr": 0.1, "method": "sgd"}"#).unwrap();
        assert_eq!(c, OptimConfig::sgd(0.1));
        let c: OptimConfig = serde_json::from_str(r#"{"method": "adam", "beta2": 0.99}"#).unwrap();
        assert_eq!(c.method, Method::Adam { beta1: 0.9, beta2: 0.99, eps: 1e-8 });
        let back: OptimConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
