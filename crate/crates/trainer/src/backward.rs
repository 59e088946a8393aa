use std::collections::BTreeMap;

use spikesplit_core::layers::{col2im, im2col, BatchStats, Conv2d, ConvKind, Head, Tdbn};
use spikesplit_core::network::{Block, BlockCache, ConvUnit, SpikingNetwork, Tape, UnitCache};
use spikesplit_core::spike::{surrogate_grad, LifParams, SurrogateParams};
use spikesplit_core::{Real, Tensor};

use crate::{Result, TrainError};

/// Gradients keyed like [`SpikingNetwork::named_tensors`].
pub type Grads<F> = BTreeMap<String, Vec<F>>;

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy<F: Real>(logits: &[F], labels: &[usize], classes: usize) -> (F, Vec<F>) {
    let batch = labels.len();
    let inv_b = F::one() / F::lit(batch as f64);
    let mut loss = F::zero();
    let mut grad = vec![F::zero(); logits.len()];
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let z: F = row.iter().map(|&v| (v - max).exp()).sum();
        loss += (z.ln() + max - row[y]) * inv_b;
        for (k, g) in grad[b * classes..(b + 1) * classes].iter_mut().enumerate() {
            let p = (row[k] - max).exp() / z;
            let target = if k == y { F::one() } else { F::zero() };
            *g = (p - target) * inv_b;
        }
    }
    (loss, grad)
}

/// Parameter gradients of the loss whose logit gradient is `dlogits`.
pub fn backward<F: Real>(
    net: &SpikingNetwork<F>,
    tape: &Tape<F>,
    dlogits: &[F],
    sg: &SurrogateParams,
) -> Result<Grads<F>> {
    let lif = net.lif();
    let mut grads = Grads::new();
    let mut d = head_backward(&net.head, &tape.head_input, dlogits, &mut grads)?;
    let split = net.bottleneck.as_ref().map(|(s, _)| *s);
    for i in (0..net.blocks.len()).rev() {
        if split == Some(i + 1) {
            let (_, b) = net.bottleneck.as_ref().expect("split set");
            let missing = || TrainError::MissingState("bottleneck caches".into());
            let (ce, cd) = (tape.encoder.as_ref().ok_or_else(missing)?, tape.decoder.as_ref().ok_or_else(missing)?);
            d = unit_backward(&b.decoder, cd, &d, Some((lif, sg)), "bottleneck.decoder", &mut grads)?.0;
            d = unit_backward(&b.encoder, ce, &d, Some((lif, sg)), "bottleneck.encoder", &mut grads)?.0;
        }
        let cache = tape
            .blocks
            .get(i)
            .ok_or_else(|| TrainError::MissingState(format!("block {}", i + 1)))?;
        d = block_backward(&net.blocks[i], cache, &d, lif, sg, &format!("blocks.{}", i + 1), &mut grads)?;
    }
    unit_backward(&net.stem, &tape.stem, &d, Some((lif, sg)), "stem", &mut grads)?;
    Ok(grads)
}

fn block_backward<F: Real>(
    block: &Block<F>,
    cache: &BlockCache<F>,
    d_out: &Tensor<F>,
    lif: &LifParams,
    sg: &SurrogateParams,
    prefix: &str,
    grads: &mut Grads<F>,
) -> Result<Tensor<F>> {
    let l = Some((lif, sg));
    match (block, cache) {
        (Block::Unit(u), BlockCache::Unit(c)) => Ok(unit_backward(u, c, d_out, l, &format!("{prefix}.unit"), grads)?.0),
        (Block::Residual { a, b, c, shortcut }, BlockCache::Residual { a: ca, b: cb, c: cc, shortcut: cs }) => {
            let (d_ob, d_skip) = unit_backward(c, cc, d_out, l, &format!("{prefix}.c"), grads)?;
            let (d_oa, _) = unit_backward(b, cb, &d_ob, l, &format!("{prefix}.b"), grads)?;
            let (mut dx, _) = unit_backward(a, ca, &d_oa, l, &format!("{prefix}.a"), grads)?;
            let d_skip = d_skip.expect("residual unit returns the skip gradient");
            let dx_skip = match (shortcut, cs) {
                (Some(s), Some(cache)) => unit_backward(s, cache, &d_skip, None, &format!("{prefix}.shortcut"), grads)?.0,
                (None, None) => d_skip,
                _ => return Err(TrainError::MissingState(format!("{prefix} shortcut cache"))),
            };
            dx.add_assign(&dx_skip)?;
            Ok(dx)
        }
        (Block::Separable { depthwise, pointwise }, BlockCache::Separable { depthwise: cd, pointwise: cp }) => {
            let (d, _) = unit_backward(pointwise, cp, d_out, l, &format!("{prefix}.pointwise"), grads)?;
            Ok(unit_backward(depthwise, cd, &d, l, &format!("{prefix}.depthwise"), grads)?.0)
        }
        _ => Err(TrainError::MissingState(format!("{prefix}: cache does not match block"))),
    }
}

/// Returns the input gradient and, for units with a LIF, the gradient of the
/// pre-spike current (which is also the residual branch's gradient).
fn unit_backward<F: Real>(
    unit: &ConvUnit<F>,
    cache: &UnitCache<F>,
    d_out: &Tensor<F>,
    lif: Option<(&LifParams, &SurrogateParams)>,
    name: &str,
    grads: &mut Grads<F>,
) -> Result<(Tensor<F>, Option<Tensor<F>>)> {
    let d_current = match lif {
        Some((p, sg)) => {
            let missing = || TrainError::MissingState(format!("{name} membrane trace"));
            let v = cache.membrane.as_ref().ok_or_else(missing)?;
            let o = cache.spikes.as_ref().ok_or_else(missing)?;
            lif_backward(d_out, v, o, p, sg)
        }
        None => d_out.clone(),
    };
    let d_z = match (&unit.bn, &cache.stats) {
        (Some(bn), Some(stats)) => tdbn_backward(bn, &cache.conv_out, stats, &d_current, name, grads),
        (None, _) => d_current.clone(),
        (Some(_), None) => return Err(TrainError::MissingState(format!("{name} batch statistics"))),
    };
    let d_raw = match &unit.crop {
        Some(crop) => crop.pad_back(&d_z, cache.raw_shape),
        None => d_z,
    };
    let dx = conv_backward(&unit.conv, &cache.input, &d_raw, name, grads)?;
    Ok((dx, lif.map(|_| d_current)))
}

/// BPTT through `V_t = tau * V_{t-1} * (1 - o_{t-1}) + x_t`, `o_t = H(V_t - V_th)`,
/// with the reset factor held constant.
pub fn lif_backward<F: Real>(
    d_spikes: &Tensor<F>,
    membrane: &Tensor<F>,
    spikes: &Tensor<F>,
    p: &LifParams,
    sg: &SurrogateParams,
) -> Tensor<F> {
    let s = d_spikes.shape();
    let n = s.step_len();
    let tau = F::lit(p.tau_decay);
    let mut carry = vec![F::zero(); n];
    let mut dx = Tensor::zeros(s);
    for t in (0..s.t).rev() {
        let (dy, v, o) = (d_spikes.step(t), membrane.step(t), spikes.step(t));
        let out = dx.step_mut(t);
        for i in 0..n {
            // V_{t+1} carries tau * V_t only if step t did not fire.
            let dv = dy[i] * surrogate_grad(v[i], p, sg) + carry[i] * (F::one() - o[i]);
            out[i] = dv;
            carry[i] = dv * tau;
        }
    }
    dx
}

fn accumulate<F: Real>(grads: &mut Grads<F>, name: String, g: Vec<F>) {
    match grads.get_mut(&name) {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        None => {
            grads.insert(name, g);
        }
    }
}

/// Train-mode tdBN backward with batch statistics.
fn tdbn_backward<F: Real>(
    bn: &Tdbn<F>,
    z: &Tensor<F>,
    stats: &BatchStats<F>,
    dy: &Tensor<F>,
    name: &str,
    grads: &mut Grads<F>,
) -> Tensor<F> {
    let s = z.shape();
    let plane = s.plane();
    let count = F::lit((s.t * s.b * plane) as f64);
    let gain = bn.alpha * bn.v_th;
    let inv_std: Vec<F> = stats.var.iter().map(|&v| F::one() / (v + bn.eps).sqrt()).collect();
    let mut d_lambda = vec![F::zero(); s.c];
    let mut d_beta = vec![F::zero(); s.c];
    // Per-channel sums of g = dy * lambda * gain and of g * xhat.
    let mut sum_g = vec![F::zero(); s.c];
    let mut sum_gx = vec![F::zero(); s.c];
    let xhat = |c: usize, v: F| (v - stats.mean[c]) * inv_std[c];
    for t in 0..s.t {
        for b in 0..s.b {
            let (zf, df) = (z.frame(t, b), dy.frame(t, b));
            for c in 0..s.c {
                for i in c * plane..(c + 1) * plane {
                    let xh = xhat(c, zf[i]);
                    d_beta[c] += df[i];
                    d_lambda[c] += df[i] * gain * xh;
                    let g = df[i] * bn.lambda[c] * gain;
                    sum_g[c] += g;
                    sum_gx[c] += g * xh;
                }
            }
        }
    }
    let mut dz = Tensor::zeros(s);
    for t in 0..s.t {
        for b in 0..s.b {
            let (zf, df) = (z.frame(t, b), dy.frame(t, b));
            let out = dz.frame_mut(t, b);
            for c in 0..s.c {
                let k = inv_std[c] / count;
                for i in c * plane..(c + 1) * plane {
                    let g = df[i] * bn.lambda[c] * gain;
                    out[i] = k * (count * g - sum_g[c] - xhat(c, zf[i]) * sum_gx[c]);
                }
            }
        }
    }
    accumulate(grads, format!("{name}.bn.lambda"), d_lambda);
    accumulate(grads, format!("{name}.bn.beta"), d_beta);
    dz
}

fn conv_backward<F: Real>(
    conv: &Conv2d<F>,
    x: &Tensor<F>,
    dy: &Tensor<F>,
    name: &str,
    grads: &mut Grads<F>,
) -> Result<Tensor<F>> {
    let s = x.shape();
    let g = conv.geometry(s.h, s.w)?;
    let mut dw = vec![F::zero(); conv.weight.len()];
    let mut dx = Tensor::zeros(s);
    let rows = g.col_rows();
    let n = g.col_cols();
    let mut col = vec![F::zero(); rows * n];
    let mut dcol = vec![F::zero(); rows * n];
    for t in 0..s.t {
        for b in 0..s.b {
            let (xf, df) = (x.frame(t, b), dy.frame(t, b));
            match conv.kind {
                ConvKind::Standard => {
                    let cols: &[F] = if conv.is_pointwise() {
                        xf
                    } else {
                        im2col(xf, &g, &mut col);
                        &col
                    };
                    let co = conv.out_channels;
                    // dW += dy * col^T
                    F::gemm(co, n, rows, F::one(), df, (n, 1), cols, (1, n), F::one(), &mut dw, (rows, 1));
                    // dcol = W^T * dy
                    F::gemm(rows, co, n, F::one(), &conv.weight, (1, rows), df, (n, 1), F::zero(), &mut dcol, (n, 1));
                    if conv.is_pointwise() {
                        dx.frame_mut(t, b).copy_from_slice(&dcol);
                    } else {
                        col2im(&dcol, &g, dx.frame_mut(t, b));
                    }
                }
                ConvKind::Transposed => {
                    let ci = conv.in_channels;
                    im2col(df, &g, &mut dcol);
                    // dW += x * dcol^T
                    F::gemm(ci, n, rows, F::one(), xf, (n, 1), &dcol, (1, n), F::one(), &mut dw, (rows, 1));
                    // dx = W * dcol
                    F::gemm(ci, rows, n, F::one(), &conv.weight, (rows, 1), &dcol, (n, 1), F::zero(), dx.frame_mut(t, b), (n, 1));
                }
                ConvKind::Depthwise => {
                    let (pin, pout) = (g.h * g.w, n);
                    let kk = rows;
                    let dxf = dx.frame_mut(t, b);
                    for c in 0..conv.out_channels {
                        im2col(&xf[c * pin..(c + 1) * pin], &g, &mut col[..kk * pout]);
                        let dyc = &df[c * pout..(c + 1) * pout];
                        let wc = &conv.weight[c * kk..(c + 1) * kk];
                        for j in 0..kk {
                            let cr = &col[j * pout..(j + 1) * pout];
                            dw[c * kk + j] += cr.iter().zip(dyc).map(|(&a, &d)| a * d).sum::<F>();
                            for (dc, &d) in dcol[j * pout..(j + 1) * pout].iter_mut().zip(dyc) {
                                *dc = wc[j] * d;
                            }
                        }
                        col2im(&dcol[..kk * pout], &g, &mut dxf[c * pin..(c + 1) * pin]);
                    }
                }
            }
        }
    }
    if conv.bias.is_some() {
        let so = dy.shape();
        let plane = so.plane();
        let mut db = vec![F::zero(); conv.out_channels];
        for t in 0..so.t {
            for b in 0..so.b {
                for (c, chunk) in dy.frame(t, b).chunks(plane).enumerate() {
                    db[c] += chunk.iter().copied().sum::<F>();
                }
            }
        }
        accumulate(grads, format!("{name}.conv.bias"), db);
    }
    accumulate(grads, format!("{name}.conv.weight"), dw);
    Ok(dx)
}

fn head_backward<F: Real>(head: &Head<F>, x: &Tensor<F>, dlogits: &[F], grads: &mut Grads<F>) -> Result<Tensor<F>> {
    let s = x.shape();
    let (c_in, k_out) = (head.in_features, head.n_classes);
    let pooled = head.pool(x)?;
    let inv_t = F::one() / F::lit(s.t as f64);
    let inv_plane = F::one() / F::lit(s.plane() as f64);
    let mut dw = vec![F::zero(); c_in * k_out];
    let mut db = vec![F::zero(); k_out];
    let mut dx = Tensor::zeros(s);
    for b in 0..s.b {
        let dl = &dlogits[b * k_out..(b + 1) * k_out];
        for (k, &d) in dl.iter().enumerate() {
            db[k] += d;
        }
        for t in 0..s.t {
            let p = &pooled[(t * s.b + b) * c_in..(t * s.b + b + 1) * c_in];
            for (k, &d) in dl.iter().enumerate() {
                for c in 0..c_in {
                    dw[k * c_in + c] += d * p[c] * inv_t;
                }
            }
            let frame = dx.frame_mut(t, b);
            for c in 0..c_in {
                let dp: F = (0..k_out).map(|k| dl[k] * head.weight[k * c_in + c]).sum::<F>() * inv_t;
                frame[c * s.plane()..(c + 1) * s.plane()].fill(dp * inv_plane);
            }
        }
    }
    accumulate(grads, "head.weight".into(), dw);
    accumulate(grads, "head.bias".into(), db);
    Ok(dx)
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use spikesplit_core::network::Crop;
    use spikesplit_core::Shape5;

    fn random(shape: Shape5, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn dot(unit: &ConvUnit<f64>, x: &Tensor<f64>, dy: &Tensor<f64>) -> f64 {
        let (y, _) = unit.clone().forward_train(x, None, None).unwrap();
        y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
    }

    /// Checks `unit_backward` without a LIF against central differences of
    /// `<dy, unit(x)>` over every parameter and input element.
    fn check_unit(mut unit: ConvUnit<f64>, input: Shape5, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some(bn) = unit.bn.as_mut() {
            bn.lambda.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
            bn.beta.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        let x = random(input, &mut rng);
        let (y, cache) = unit.clone().forward_train(&x, None, None).unwrap();
        let dy = random(y.shape(), &mut rng);
        let mut grads = Grads::new();
        let (dx, _) = unit_backward(&unit, &cache, &dy, None, "u", &mut grads).unwrap();

        let h = 1e-6;
        let close = |a: f64, b: f64, what: &str| assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{what}: {a} vs {b}");
        for i in 0..x.data().len() {
            let (mut up, mut down) = (x.clone(), x.clone());
            up.data_mut()[i] += h;
            down.data_mut()[i] -= h;
            let fd = (dot(&unit, &up, &dy) - dot(&unit, &down, &dy)) / (2.0 * h);
            close(dx.data()[i], fd, &format!("dx[{i}]"));
        }
        let params: [(&str, fn(&mut ConvUnit<f64>) -> Option<&mut Vec<f64>>); 4] = [
            ("u.conv.weight", |u| Some(&mut u.conv.weight)),
            ("u.conv.bias", |u| u.conv.bias.as_mut()),
            ("u.bn.lambda", |u| u.bn.as_mut().map(|b| &mut b.lambda)),
            ("u.bn.beta", |u| u.bn.as_mut().map(|b| &mut b.beta)),
        ];
        for (name, get) in params {
            let Some(n) = get(&mut unit.clone()).map(|v| v.len()) else {
                assert!(!grads.contains_key(name), "{name} present without parameter");
                continue;
            };
            let g = &grads[name];
            for i in 0..n {
                let (mut up, mut down) = (unit.clone(), unit.clone());
                get(&mut up).unwrap()[i] += h;
                get(&mut down).unwrap()[i] -= h;
                let fd = (dot(&up, &x, &dy) - dot(&down, &x, &dy)) / (2.0 * h);
                close(g[i], fd, &format!("{name}[{i}]"));
            }
        }
    }

    fn unit(kind: ConvKind, cin: usize, cout: usize, k: usize, s: usize, p: usize, bias: bool, bn: bool) -> ConvUnit<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        ConvUnit {
            conv: Conv2d::kaiming(kind, cin, cout, (k, k), (s, s), (p, p), bias, &mut rng).unwrap(),
            bn: bn.then(|| Tdbn::new(cout, 1.0, 1.0)),
            crop: None,
        }
    }

    #[test]
    fn standard_conv_with_tdbn() {
        check_unit(unit(ConvKind::Standard, 2, 3, 3, 2, 1, true, true), Shape5::new(2, 2, 2, 5, 5), 1);
    }

    #[test]
    fn pointwise_conv_without_tdbn() {
        check_unit(unit(ConvKind::Standard, 3, 2, 1, 1, 0, true, false), Shape5::new(2, 2, 3, 3, 3), 2);
    }

    #[test]
    fn depthwise_conv() {
        check_unit(unit(ConvKind::Depthwise, 3, 3, 3, 2, 1, false, true), Shape5::new(1, 3, 3, 5, 4), 3);
    }

    #[test]
    fn transposed_conv_with_crop() {
        let mut u = unit(ConvKind::Transposed, 3, 2, 3, 2, 1, false, true);
        // 3x3 upsamples to 5x5; keep an off-center 4x3 window.
        u.crop = Some(Crop { top: 1, left: 0, h: 4, w: 3 });
        check_unit(u, Shape5::new(2, 2, 3, 3, 3), 4);
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let logits: [f64; 6] = [0.3, -1.2, 2.0, 0.1, 0.0, -0.4];
        let labels = [2, 0];
        let (_, g) = cross_entropy(&logits, &labels, 3);
        for i in 0..logits.len() {
            let (mut up, mut down) = (logits, logits);
            up[i] += 1e-6;
            down[i] -= 1e-6;
            let fd = (cross_entropy(&up, &labels, 3).0 - cross_entropy(&down, &labels, 3).0) / 2e-6;
            assert!((g[i] - fd).abs() < 1e-8_f64);
        }
    }
}
