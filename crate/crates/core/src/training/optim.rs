use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Grads, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Decay applies only to parameters
/// flagged `decay` in the store.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        AdamW {
            cfg,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        Some((self.m[id.0].as_ref()?, self.v[id.0].as_ref()?))
    }

    /// Updates every parameter in `params`. A missing gradient counts as
    /// zero. Non-finite gradients abort the step before anything changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, params: &[ParamId], lr: f64) -> Result<()> {
        for &id in params {
            if let Some(g) = grads.get(id) {
                if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        node: format!("gradient of {} (index {i}); optimizer step aborted", store.name(id)),
                    });
                }
            }
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for &id in params {
            let decay = store.param(id).decay && weight_decay != 0.0;
            let shape = store.value(id).shape().to_vec();
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            let theta = store.value_mut(id).data_mut();
            let g = grads.get(id).map(Tensor::data);
            for i in 0..theta.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                let mi = &mut m.data_mut()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                let mi = *mi;
                let vi = &mut v.data_mut()[i];
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let vi = *vi;
                if decay {
                    theta[i] -= lr * weight_decay * theta[i];
                }
                theta[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::vector(&[1.0, -2.0, 0.5]).unwrap(), true);
        let b = s.add("b", Tensor::vector(&[3.0]).unwrap(), false);
        (s, w, b)
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let (mut s, w, b) = store();
        let before = s.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        let mut grads = Grads::new(&s);
        grads.set(w, Tensor::zeros(&[3]));
        opt.step(&mut s, &grads, &[w, b], 0.1).unwrap();
        assert_eq!(s.value(w), before.value(w));
        assert_eq!(s.value(b), before.value(b));
    }

    #[test]
    fn zero_grad_decay_closed_form() {
        let (mut s, w, b) = store();
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let grads = Grads::new(&s);
        opt.step(&mut s, &grads, &[w, b], 0.1).unwrap();
        let k = 1.0 - 0.1 * 0.01;
        for (x, y) in s.value(w).data().iter().zip([1.0, -2.0, 0.5]) {
            assert!((x - y * k).abs() < 1e-15);
        }
        assert_eq!(s.value(b).data(), &[3.0]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let (mut s, w, _) = store();
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &s,
        );
        let mut grads = Grads::new(&s);
        let g = [0.3, -4.0, 1e-3];
        grads.set(w, Tensor::vector(&g).unwrap());
        opt.step(&mut s, &grads, &[w], 0.01).unwrap();
        for ((x, x0), gi) in s.value(w).data().iter().zip([1.0, -2.0, 0.5]).zip(g) {
            let want = x0 - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((x - want).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut s, w, b) = store();
        let before = s.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let mut grads = Grads::new(&s);
        grads.set(b, Tensor::vector(&[1.0]).unwrap());
        let mut bad = Tensor::zeros(&[3]);
        bad.data_mut()[1] = f64::NAN;
        grads.set(w, bad);
        let err = opt.step(&mut s, &grads, &[b, w], 0.1).unwrap_err();
        assert!(err.to_string().contains("gradient of w"));
        assert_eq!(s.value(b), before.value(b));
        assert_eq!(opt.steps(), 0);
    }
}
