//! AdamW with per-group learning rate and decoupled weight decay.

use sparsepo_tensor::Tensor;

use crate::archive::Archive;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: &'static str,
    pub lr: f64,
    pub weight_decay: f64,
    pub params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl ParamGroup {
    pub fn new(name: &'static str, params: Vec<Tensor>, lr: f64, weight_decay: f64) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect::<Vec<_>>();
        Self {
            name,
            lr,
            weight_decay,
            v: m.clone(),
            m,
            params,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub groups: Vec<ParamGroup>,
    step: u64,
}

impl AdamW {
    pub fn new(groups: Vec<ParamGroup>) -> Self {
        Self { groups, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&self) {
        for g in &self.groups {
            for p in &g.params {
                p.zero_grad();
            }
        }
    }

    /// L2 norm of all accumulated gradients (missing grads count as zero).
    pub fn grad_norm(&self) -> f64 {
        let mut s = 0.0;
        for g in &self.groups {
            for p in &g.params {
                if let Some(grad) = p.grad() {
                    s += grad.iter().map(|x| x * x).sum::<f64>();
                }
            }
        }
        s.sqrt()
    }

    /// One update with every group's lr multiplied by `lr_factor`.
    /// Gradients are rescaled by `grad_scale` first (clipping).
    pub fn step(&mut self, lr_factor: f64, grad_scale: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for g in &mut self.groups {
            let lr = g.lr * lr_factor;
            let decay = 1.0 - lr * g.weight_decay;
            for ((p, m), v) in g.params.iter().zip(&mut g.m).zip(&mut g.v) {
                let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
                p.update_data(|data| {
                    for i in 0..data.len() {
                        let gi = grad[i] * grad_scale;
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        data[i] = data[i] * decay - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                });
            }
        }
    }

    pub fn to_archive(&self, archive: &mut Archive) {
        for g in &self.groups {
            for (i, (m, v)) in g.m.iter().zip(&g.v).enumerate() {
                archive.push(format!("opt.{}.{i}.m", g.name), &[m.len()], m.clone());
                archive.push(format!("opt.{}.{i}.v", g.name), &[v.len()], v.clone());
            }
        }
    }

    pub fn load_state(&mut self, archive: &Archive, step: u64) -> Result<()> {
        for g in &mut self.groups {
            for (i, (m, v)) in g.m.iter_mut().zip(&mut g.v).enumerate() {
                for (suffix, dst) in [("m", &mut *m), ("v", &mut *v)] {
                    let t = archive.get(&format!("opt.{}.{i}.{suffix}", g.name))?;
                    if t.data.len() != dst.len() {
                        return Err(Error::Checkpoint(format!(
                            "optimizer state opt.{}.{i}.{suffix} has {} values, expected {}",
                            g.name,
                            t.data.len(),
                            dst.len()
                        )));
                    }
                    dst.copy_from_slice(&t.data);
                }
            }
        }
        self.step = step;
        Ok(())
    }
}
