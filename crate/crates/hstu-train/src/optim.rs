//! Adaptive-moment optimizer over the model's named-tensor visitor, with
//! dense embedding updates sized for desk-scale vocabularies.

use anyhow::bail;
use hstu_core::model::Hstu;

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug)]
pub struct Adam {
    pub params: AdamParams,
    m: Hstu,
    v: Hstu,
    t: u64,
}

impl Adam {
    pub fn new(model: &Hstu, params: AdamParams) -> Adam {
        Adam { params, m: model.zeros_like(), v: model.zeros_like(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, model: &mut Hstu, grads: &Hstu) -> anyhow::Result<()> {
        self.t += 1;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(self.t as i32);
        let bc2 = 1.0 - p.beta2.powi(self.t as i32);
        let mut target = model.tensors_mut();
        let mut ms = self.m.tensors_mut();
        let mut vs = self.v.tensors_mut();
        let gs = grads.tensors();
        if target.len() != gs.len() {
            bail!("gradient container has {} tensors, model has {}", gs.len(), target.len());
        }
        for (((tn, _, tv), (mn, _, mv)), ((vn, _, vv), (gn, _, gv))) in
            target.iter_mut().zip(ms.iter_mut()).zip(vs.iter_mut().zip(gs.iter()))
        {
            if tn != gn || tn != mn || tn != vn {
                bail!("tensor order mismatch: {tn} vs {gn}");
            }
            if tv.len() != gv.len() {
                bail!("{tn}: {} values vs {} gradient values", tv.len(), gv.len());
            }
            for i in 0..tv.len() {
                let g = gv[i];
                if !g.is_finite() {
                    bail!("non-finite gradient in {tn}");
                }
                mv[i] = p.beta1 * mv[i] + (1.0 - p.beta1) * g;
                vv[i] = p.beta2 * vv[i] + (1.0 - p.beta2) * g * g;
                tv[i] -= p.lr * (mv[i] / bc1) / ((vv[i] / bc2).sqrt() + p.eps);
            }
        }
        Ok(())
    }
}

/// In-place `into += other`, in the visitor's fixed tensor order.
pub fn add_grads(into: &mut Hstu, other: &Hstu) {
    let mut dst = into.tensors_mut();
    let src = other.tensors();
    debug_assert_eq!(dst.len(), src.len());
    for ((_, _, d), (_, _, s)) in dst.iter_mut().zip(src.iter()) {
        for (a, b) in d.iter_mut().zip(s.iter()) {
            *a += b;
        }
    }
}

pub fn scale_grads(grads: &mut Hstu, factor: f64) {
    for (_, _, buf) in grads.tensors_mut() {
        for g in buf {
            *g *= factor;
        }
    }
}
