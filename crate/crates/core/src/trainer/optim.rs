use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

use super::checkpoint::OPTIM_PREFIX;

/// AdamW with decoupled weight decay. State exists only for trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f32, beta1: f32, beta2: f32, eps: f32, weight_decay: f32) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in params.iter().filter(|(_, t)| t.requires_grad()) {
            m.insert(name.clone(), vec![0.0; t.numel()]);
            v.insert(name.clone(), vec![0.0; t.numel()]);
        }
        AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Number of parameter tensors with optimizer state.
    pub fn state_tensor_count(&self) -> usize {
        self.m.len()
    }

    /// Number of scalar parameters with optimizer state.
    pub fn state_numel(&self) -> usize {
        self.m.values().map(Vec::len).sum()
    }

    pub fn tracks(&self, name: &str) -> bool {
        self.m.contains_key(name)
    }

    /// Applies one update from the gradients stored on `params`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.step as i32);
        let step_size = (self.lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (name, m) in self.m.iter_mut() {
            let v = self.v.get_mut(name).expect("m and v share keys");
            let t = params.get_mut(name)?;
            let g = t
                .grad()
                .ok_or_else(|| Error::config(format!("no gradient for `{name}`")))?
                .to_vec();
            let data = t.data_mut();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let denom = v[i].sqrt() / bc2_sqrt + self.eps;
                data[i] -= self.lr * self.weight_decay * data[i];
                data[i] -= step_size * m[i] / denom;
            }
        }
        Ok(())
    }

    /// Moment buffers as `optim.m.<name>` and `optim.v.<name>` tensors.
    pub fn to_tensors(&self, params: &ParamStore) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (name, m) in &self.m {
            let shape = params.get(name)?.shape().to_vec();
            out.insert(format!("{OPTIM_PREFIX}m.{name}"), Tensor::new(shape.clone(), m.clone())?);
            out.insert(format!("{OPTIM_PREFIX}v.{name}"), Tensor::new(shape, self.v[name].clone())?);
        }
        Ok(out)
    }

    /// Restores moment buffers saved by [`AdamW::to_tensors`].
    pub fn load_tensors(&mut self, saved: &ParamStore, step: u64) -> Result<()> {
        for (name, m) in self.m.iter_mut() {
            let sm = saved.get(&format!("{OPTIM_PREFIX}m.{name}"))?;
            let sv = saved.get(&format!("{OPTIM_PREFIX}v.{name}"))?;
            if sm.numel() != m.len() || sv.numel() != m.len() {
                return Err(Error::Integrity {
                    entry: format!("{OPTIM_PREFIX}m.{name}"),
                    detail: "optimizer state size does not match parameter".into(),
                });
            }
            m.copy_from_slice(sm.data());
            self.v.get_mut(name).unwrap().copy_from_slice(sv.data());
        }
        self.step = step;
        Ok(())
    }
}

/// Global L2 norm over all trainable gradients.
pub fn grad_norm(params: &ParamStore) -> f32 {
    let sq: f64 = params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum();
    sq.sqrt() as f32
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f32) -> f32 {
    let norm = grad_norm(params);
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / (norm + 1e-6);
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad() {
                let g: Vec<f32> = g.iter().map(|v| v * scale).collect();
                t.set_grad(g).expect("same shape");
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // after one step m_hat = g and v_hat = g^2 so the update is lr * sign(g)
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_vec(vec![1.0, -2.0]).with_grad(true));
        p.insert("frozen", Tensor::from_vec(vec![5.0]));
        p.get_mut("x").unwrap().set_grad(vec![0.5, -3.0]).unwrap();
        let mut opt = AdamW::new(&p, 0.1, 0.9, 0.999, 1e-8, 0.0);
        assert_eq!(opt.state_tensor_count(), 1);
        opt.step(&mut p).unwrap();
        let x = p.get("x").unwrap().data();
        assert!((x[0] - 0.9).abs() < 1e-6);
        assert!((x[1] + 1.9).abs() < 1e-6);
        assert_eq!(p.get("frozen").unwrap().data(), &[5.0]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_vec(vec![3.0]).with_grad(true));
        let mut opt = AdamW::new(&p, 0.05, 0.9, 0.999, 1e-8, 0.0);
        for _ in 0..500 {
            let x = p.get("x").unwrap().data()[0];
            p.get_mut("x").unwrap().set_grad(vec![2.0 * (x - 1.0)]).unwrap();
            opt.step(&mut p).unwrap();
        }
        assert!((p.get("x").unwrap().data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::from_vec(vec![0.0, 0.0]).with_grad(true));
        p.get_mut("a").unwrap().set_grad(vec![3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut p, 1.0), 5.0);
        assert!((grad_norm(&p) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn state_round_trip() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(vec![1.0, 2.0]).with_grad(true));
        p.get_mut("w").unwrap().set_grad(vec![0.1, 0.2]).unwrap();
        let mut opt = AdamW::new(&p, 0.01, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut p).unwrap();
        let saved = opt.to_tensors(&p).unwrap();
        let mut restored = AdamW::new(&p, 0.01, 0.9, 0.999, 1e-8, 0.0);
        restored.load_tensors(&saved, opt.step_count()).unwrap();
        assert_eq!(restored, opt);
    }
}
