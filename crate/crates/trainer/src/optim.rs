use std::collections::BTreeMap;

use spikesplit_core::network::{ConvUnit, SpikingNetwork};
use spikesplit_core::Real;

use crate::backward::Grads;
use crate::{Result, TrainError};

/// Trainable tensors with their gradient names.
pub fn params_mut<F: Real>(net: &mut SpikingNetwork<F>) -> Vec<(String, &mut Vec<F>)> {
    fn unit<'a, F>(name: String, u: &'a mut ConvUnit<F>, out: &mut Vec<(String, &'a mut Vec<F>)>) {
        let ConvUnit { conv, bn, .. } = u;
        out.push((format!("{name}.conv.weight"), &mut conv.weight));
        if let Some(b) = conv.bias.as_mut() {
            out.push((format!("{name}.conv.bias"), b));
        }
        if let Some(bn) = bn.as_mut() {
            out.push((format!("{name}.bn.lambda"), &mut bn.lambda));
            out.push((format!("{name}.bn.beta"), &mut bn.beta));
        }
    }
    let SpikingNetwork {
        stem,
        blocks,
        head,
        bottleneck,
        ..
    } = net;
    let mut out = Vec::new();
    unit("stem".into(), stem, &mut out);
    for (i, block) in blocks.iter_mut().enumerate() {
        for (name, u) in block.units_mut() {
            unit(format!("blocks.{}.{name}", i + 1), u, &mut out);
        }
    }
    if let Some((_, b)) = bottleneck.as_mut() {
        unit("bottleneck.encoder".into(), &mut b.encoder, &mut out);
        unit("bottleneck.decoder".into(), &mut b.decoder, &mut out);
    }
    out.push(("head.weight".into(), &mut head.weight));
    out.push(("head.bias".into(), &mut head.bias));
    out
}

/// SGD with heavy-ball momentum: `v <- mu * v + g`, `p <- p - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<F> {
    pub momentum: F,
    velocity: BTreeMap<String, Vec<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum: F::lit(momentum),
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, net: &mut SpikingNetwork<F>, grads: &Grads<F>, lr: f64) -> Result<()> {
        let lr = F::lit(lr);
        for (name, p) in params_mut(net) {
            let g = grads.get(&name).ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| vec![F::zero(); p.len()]);
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at epoch 0 towards 0 at `epochs`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}
