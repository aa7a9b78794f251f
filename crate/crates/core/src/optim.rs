//! Named parameter storage and the Adam optimizer.
//!
//! Parameters live in a `BTreeMap` keyed by stable dotted names, which
//! fixes both checkpoint entry order and optimizer update order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    m: Tensor,
    v: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
    /// Bias-correction step counter, shared by all entries.
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.to_string(),
            Param {
                grad: Tensor::zeros(shape.clone()),
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape),
                value,
                trainable: true,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown param {name}")).value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown param {name}")).value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.entries[name].grad
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// Mark every parameter whose name starts with `prefix` (non-)trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries[name].trainable
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[f32]) {
        if let Some(p) = self.entries.get_mut(name) {
            debug_assert_eq!(p.grad.numel(), grad.len(), "grad shape mismatch for {name}");
            for (g, &c) in p.grad.data_mut().iter_mut().zip(grad) {
                *g += c;
            }
        }
    }

    /// Bias-corrected Adam step over all trainable entries using the
    /// currently accumulated gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        for p in self.entries.values_mut() {
            if !p.trainable {
                // moments still decay so freeze/unfreeze is well-defined
                continue;
            }
            adam_update(
                p.value.data_mut(),
                p.grad.data(),
                p.m.data_mut(),
                p.v.data_mut(),
                cfg,
                t,
            )
            .expect("param/state shapes agree by construction");
        }
    }

    /// Snapshot of (name, value) pairs in deterministic order, plus
    /// per-entry Adam moments, for checkpointing.
    pub fn export(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, p) in &self.entries {
            out.push((name.clone(), p.value.clone()));
            out.push((format!("{name}#m"), p.m.clone()));
            out.push((format!("{name}#v"), p.v.clone()));
        }
        out
    }

    /// Rebuild from checkpoint entries. `#m`/`#v` suffixed names carry
    /// optimizer moments; anything else is a parameter value.
    pub fn import(entries: &[(String, Tensor)]) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, value) in entries {
            if !name.contains('#') {
                store.insert(name, value.clone());
            }
        }
        for (name, value) in entries {
            if let Some(base) = name.strip_suffix("#m") {
                let p = store
                    .entries
                    .get_mut(base)
                    .ok_or_else(|| Error::Format(format!("moment for unknown param {base}")))?;
                if p.m.shape() != value.shape() {
                    return Err(Error::Format(format!("moment shape mismatch for key {name}")));
                }
                p.m = value.clone();
            } else if let Some(base) = name.strip_suffix("#v") {
                let p = store
                    .entries
                    .get_mut(base)
                    .ok_or_else(|| Error::Format(format!("moment for unknown param {base}")))?;
                if p.v.shape() != value.shape() {
                    return Err(Error::Format(format!("moment shape mismatch for key {name}")));
                }
                p.v = value.clone();
            }
        }
        Ok(store)
    }
}

/// One bias-corrected Adam update on raw buffers.
pub fn adam_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    cfg: &AdamConfig,
    t: i32,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != m.len() || param.len() != v.len() {
        return Err(Error::Dimension(format!(
            "adam buffers disagree: param {} grad {} m {} v {}",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..param.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged_and_decays_moments() {
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut p = vec![1.0f32, -2.0];
        let mut m = vec![0.5f32, 0.5];
        let mut v = vec![0.25f32, 0.25];
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, &cfg, 1).unwrap();
        // moments decayed
        assert!((m[0] - 0.45).abs() < 1e-6);
        assert!((v[0] - 0.2375).abs() < 1e-6);
        // step direction m_hat/(sqrt(v_hat)+eps) is nonzero only because of
        // stale moments; with fresh moments the params stay put
        let mut p2 = vec![1.0f32];
        let mut m2 = vec![0.0f32];
        let mut v2 = vec![0.0f32];
        adam_update(&mut p2, &[0.0], &mut m2, &mut v2, &cfg, 1).unwrap();
        assert_eq!(p2[0], 1.0);
    }

    #[test]
    fn first_step_is_sign_scaled_lr() {
        // bias correction makes m_hat = g, v_hat = g^2 on step one,
        // so the step is -lr * g / (|g| + eps) = -lr * sign(g)
        let cfg = AdamConfig { lr: 0.1, eps: 1e-8, ..Default::default() };
        let mut p = vec![0.0f32, 0.0];
        let mut m = vec![0.0f32, 0.0];
        let mut v = vec![0.0f32, 0.0];
        adam_update(&mut p, &[0.7, -3.0], &mut m, &mut v, &cfg, 1).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-5, "{}", p[0]);
        assert!((p[1] - 0.1).abs() < 1e-5, "{}", p[1]);
    }

    #[test]
    fn descends_quadratic() {
        // 10 steps on f(x) = x^2 from x = 1 with lr 0.1: |x| strictly decreases
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut x = vec![1.0f32];
        let mut m = vec![0.0f32];
        let mut v = vec![0.0f32];
        let mut prev = x[0].abs();
        for t in 1..=10 {
            let g = vec![2.0 * x[0]];
            adam_update(&mut x, &g, &mut m, &mut v, &cfg, t).unwrap();
            assert!(x[0].abs() < prev, "step {t}: |x| {} !< {prev}", x[0].abs());
            prev = x[0].abs();
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0f32; 2];
        let mut m = vec![0.0f32; 2];
        let mut v = vec![0.0f32; 2];
        assert!(adam_update(&mut p, &[0.0; 3], &mut m, &mut v, &cfg, 1).is_err());
    }

    #[test]
    fn store_freezes_by_prefix() {
        let mut store = ParamStore::new();
        store.insert("base.w", Tensor::full(vec![2], 1.0));
        store.insert("distill.w", Tensor::full(vec![2], 1.0));
        store.set_trainable_prefix("base.", false);
        store.accumulate_grad("base.w", &[1.0, 1.0]);
        store.accumulate_grad("distill.w", &[1.0, 1.0]);
        let before = store.get("base.w").clone();
        store.adam_step(&AdamConfig::default());
        assert_eq!(store.get("base.w"), &before);
        assert_ne!(store.get("distill.w"), &before);
    }

    #[test]
    fn export_import_roundtrip() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::full(vec![3], 0.5));
        store.insert("b.w", Tensor::full(vec![2], -1.0));
        store.accumulate_grad("a.w", &[1.0; 3]);
        store.adam_step(&AdamConfig::default());
        let entries = store.export();
        let rebuilt = ParamStore::import(&entries).unwrap();
        assert_eq!(rebuilt.export(), entries);
    }
}
