//! Finite-difference cases over every differentiable op and both
//! distillation losses, shared by the op tests and the acceptance run.

use svbi::backbone::{build_teacher, BackboneSpec, SplitModel};
use svbi::codec::{CompressionModel, DecoderConfig, EncoderConfig};
use svbi::nn::{seeded_rng, upsample_block};
use svbi::tensor::{ParamStore, Tape, Tensor};
use svbi::training::{hd_loss, sg_hd_loss};

use super::{fd_relative_errors, rand_tensor, relative_error};

pub const FD_TOL: f64 = 1e-3;

/// Relu inputs kept at least 0.1 away from the kink.
fn off_kink(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| {
        let v = ((i * 7919) % 23) as f32 / 23.0 - 0.5;
        if v.abs() < 0.1 {
            v + 0.2
        } else {
            v
        }
    })
}

/// `(name, worst relative error)` for each op-level case.
pub fn op_cases() -> Vec<(&'static str, f64)> {
    let worst = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    let mut out = Vec::new();

    let x = rand_tensor(&[2, 2, 5, 5], 31);
    let w = rand_tensor(&[3, 2, 3, 3], 32);
    let b = rand_tensor(&[3], 33);
    let target = rand_tensor(&[2, 3, 3, 3], 34);
    out.push((
        "conv2d+mse",
        worst(fd_relative_errors(
            &[x, w, b, target],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
                t.mse(y, v[3]).unwrap()
            },
            1e-2,
        )),
    ));

    let w = rand_tensor(&[4, 3], 41);
    let b = rand_tensor(&[4], 42);
    let skip = rand_tensor(&[2, 3, 2, 2], 43);
    out.push((
        "relu+scale+add+pool+linear+sum",
        worst(fd_relative_errors(
            &[off_kink(&[2, 3, 2, 2]), w, b, skip],
            |t, v| {
                let r = t.relu(v[0]);
                let s = t.scale(v[3], 0.7);
                let a = t.add(r, s).unwrap();
                let p = t.global_avg_pool(a).unwrap();
                let y = t.linear(p, v[1], Some(v[2])).unwrap();
                let sq = t.mse(y, y).unwrap();
                let total = t.sum(y);
                t.add(total, sq).unwrap()
            },
            1e-2,
        )),
    ));

    let x = rand_tensor(&[2, 4, 3, 3], 51);
    let w = rand_tensor(&[8, 4, 3, 3], 52);
    let target = rand_tensor(&[2, 2, 6, 6], 53);
    let weights = Tensor::from_fn([2, 6, 6], |i| 0.1 + (i % 5) as f32 * 0.4);
    out.push((
        "pixel_shuffle+weighted_mse",
        worst(fd_relative_errors(
            &[x, w, target],
            move |t, v| {
                let y = upsample_block(t, v[0], v[1], None, 2).unwrap();
                t.weighted_mse(y, v[2], weights.clone()).unwrap()
            },
            1e-2,
        )),
    ));

    let logits = Tensor::new([3, 5], rand_tensor(&[3, 5], 61).data().iter().map(|v| v * 3.0).collect()).unwrap();
    let teacher = rand_tensor(&[3, 5], 62);
    out.push((
        "softmax_cross_entropy",
        worst(fd_relative_errors(
            std::slice::from_ref(&logits),
            |t, v| t.softmax_cross_entropy(v[0], &[4, 0, 2]).unwrap(),
            1e-2,
        )),
    ));
    out.push((
        "kd_divergence",
        fd_relative_errors(
            &[logits, teacher],
            |t, v| {
                let teacher = t.detach(v[1]);
                t.kd_divergence(v[0], teacher, 2.5).unwrap()
            },
            1e-2,
        )[0],
    ));

    let p = Tensor::from_fn([6], |i| 0.1 + 0.12 * i as f32);
    out.push(("neg_log2_sum", fd_relative_errors(&[p], |t, v| t.neg_log2_sum(v[0]), 1e-3)[0]));
    out
}

/// Teacher and compression model small enough for parameter-wise
/// differences: 8×8 input, head output 4×2×2.
pub fn tiny_pipeline(seed: u64) -> (SplitModel, CompressionModel) {
    let spec = BackboneSpec {
        stage_depths: vec![1, 1, 1],
        stage_channels: vec![4, 4, 6],
        num_classes: 3,
        head_split_stage: 2,
        input_channels: 3,
    };
    let mut teacher = build_teacher(&spec, seed).unwrap();
    teacher.head.store.freeze();
    teacher.tail.store.freeze();
    let enc = EncoderConfig {
        input_channels: 3,
        hidden_channels: [4, 4],
        latent_channels: 2,
        strides: [2, 2, 1],
        param_budget: None,
    };
    let dec = DecoderConfig {
        latent_channels: 2,
        restoration_channels: 4,
        upsample_factor: 1,
        transformation_blocks: 1,
        output_channels: 4,
    };
    let mut model = CompressionModel::new(enc, dec, seed + 10).unwrap();
    // move the prior off its symmetric zero-bias start
    let ids: Vec<_> = model.prior_store.iter().map(|p| p.name.clone()).collect();
    for (i, name) in ids.iter().enumerate() {
        let id = model.prior_store.find(name).unwrap();
        let shape = model.prior_store.value(id).shape().to_vec();
        let noise = rand_tensor(&shape, seed * 100 + i as u64);
        for (v, n) in model.prior_store.get_mut(id).value.data_mut().iter_mut().zip(noise.data()) {
            *v += 0.3 * n;
        }
    }
    (teacher, model)
}

fn stores_mut(m: &mut CompressionModel) -> [&mut ParamStore; 3] {
    [&mut m.encoder.store, &mut m.decoder.store, &mut m.prior_store]
}

/// Finite-difference report for one parameter store.
#[derive(Clone, Debug)]
pub struct StoreFd {
    pub store: &'static str,
    pub relative_error: f64,
    pub checked: usize,
    /// Elements whose stencil switched a relu.
    pub kinked: usize,
}

/// Norm-wise relative error of an HD (`weights == None`) or SG-HD loss
/// gradient over every encoder, decoder and prior parameter. Noise is
/// fixed by `seed`. Elements whose stencil switches any relu are counted
/// rather than compared.
pub fn loss_fd(weights: Option<&Tensor>, seed: u64) -> Vec<StoreFd> {
    let (teacher, mut model) = tiny_pipeline(seed);
    let x = rand_tensor(&[2, 3, 8, 8], seed + 1);
    let beta = 0.5;
    let eval = |m: &CompressionModel, tape: &mut Tape| {
        let mut rng = seeded_rng(seed + 2);
        match weights {
            None => hd_loss(tape, &teacher, m, &x, beta, &mut rng).unwrap(),
            Some(w) => sg_hd_loss(tape, &teacher, m, &x, w, beta, &mut rng).unwrap(),
        }
        .total
    };
    let mut tape = Tape::new();
    let loss = eval(&model, &mut tape);
    let grads = tape.backward(loss).unwrap();
    for s in stores_mut(&mut model) {
        s.zero_grad();
        s.accumulate(&grads);
    }
    // loss value plus the zero pattern of every node; relu outputs are the
    // only exact zeros, so a changed pattern means a kink was crossed
    let value = |m: &CompressionModel| -> (f64, Vec<bool>) {
        let mut frozen = m.clone();
        frozen.freeze();
        let mut tape = Tape::new();
        let l = eval(&frozen, &mut tape);
        let pattern = tape.values().flat_map(|t| t.data().iter().map(|&v| v == 0.0)).collect();
        (tape.value(l).item() as f64, pattern)
    };
    let (_, center) = value(&model);
    let mut out = Vec::new();
    // the prior is smooth, so a wider step keeps f32 rounding small
    for (k, label, eps) in [(0, "encoder", 5e-3f32), (1, "decoder", 5e-3), (2, "prior", 2e-2)] {
        let names: Vec<String> = stores_mut(&mut model)[k].iter().map(|p| p.name.clone()).collect();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        let mut kinked = 0;
        for name in names {
            let id = stores_mut(&mut model)[k].find(&name).unwrap();
            let p = stores_mut(&mut model)[k].get(id).clone();
            let g = p.grad.as_ref().unwrap();
            for j in 0..p.value.numel() {
                let orig = p.value.data()[j];
                stores_mut(&mut model)[k].get_mut(id).value.data_mut()[j] = orig + eps;
                let (up, pu) = value(&model);
                stores_mut(&mut model)[k].get_mut(id).value.data_mut()[j] = orig - eps;
                let (down, pd) = value(&model);
                stores_mut(&mut model)[k].get_mut(id).value.data_mut()[j] = orig;
                if pu != center || pd != center {
                    kinked += 1;
                    continue;
                }
                analytic.push(g.data()[j] as f64);
                numeric.push((up - down) / (2.0 * eps as f64));
            }
        }
        out.push(StoreFd {
            store: label,
            relative_error: relative_error(&analytic, &numeric),
            checked: analytic.len(),
            kinked,
        });
    }
    out
}

pub fn saliency_like_weights(n: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn([n, h, w], |i| 0.4 + (i % 3) as f32 * 0.5)
}
