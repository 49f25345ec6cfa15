//! Central finite-difference checks for every differentiable primitive and
//! for the composed codebook training loss. Each check perturbs every input
//! element by +/- h and compares the quotient against the reverse-mode
//! gradient with a relative tolerance.

use svqa_core::array::Array;
use svqa_core::nn::{self, NetCtx};
use svqa_core::optim::{BoundParams, ParamStore};
use svqa_core::specvqgan;
use svqa_core::tape::{NodeId, Tape};
use svqa_core::{Config, Rng};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn run(name: &str, inputs: &[Array], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
    let forward = |values: &[Array]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).item()
    };
    let (grads, ids_len): (Vec<Option<Array>>, usize) = {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &ids);
        let mut g = tape.backward(loss);
        (ids.iter().map(|&id| g.take(id)).collect(), ids.len())
    };
    for which in 0..ids_len {
        let zero = Array::zeros(&inputs[which].shape);
        let ad = grads[which].as_ref().unwrap_or(&zero);
        for e in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            plus[which].data[e] += H;
            let mut minus = inputs.to_vec();
            minus[which].data[e] -= H;
            let fd = (forward(&plus) - forward(&minus)) / (2.0 * H);
            let a = ad.data[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            assert!(
                rel < TOL,
                "{name}: input {which} elem {e}: ad={a} fd={fd} rel={rel}"
            );
        }
    }
}

/// Reduce an arbitrary node to a scalar with fixed random weights so the
/// check exercises a generic cotangent.
fn scalarize(tape: &mut Tape, x: NodeId, seed: u64) -> NodeId {
    let shape = tape.value(x).shape.clone();
    let w = tape.constant(Array::uniform(&shape, -1.0, 1.0, &mut Rng::new(seed)));
    let p = tape.mul(x, w);
    tape.sum(p)
}

fn arr(shape: &[usize], seed: u64) -> Array {
    Array::uniform(shape, -1.0, 1.0, &mut Rng::new(seed))
}

/// Uniform values bounded away from zero, for kink-free relu checks.
fn arr_off_zero(shape: &[usize], seed: u64) -> Array {
    let mut a = arr(shape, seed);
    for v in a.data.iter_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v);
        }
    }
    a
}

pub fn elementwise_binary_ops() {
    let a = arr(&[3, 4], 1);
    let b = arr(&[3, 4], 2);
    run("add", &[a.clone(), b.clone()], |t, ids| {
        let y = t.add(ids[0], ids[1]);
        scalarize(t, y, 10)
    });
    run("sub", &[a.clone(), b.clone()], |t, ids| {
        let y = t.sub(ids[0], ids[1]);
        scalarize(t, y, 11)
    });
    run("mul", &[a, b], |t, ids| {
        let y = t.mul(ids[0], ids[1]);
        scalarize(t, y, 12)
    });
}

pub fn bias_scale_and_scalar_gate() {
    run("add_bias", &[arr(&[3, 4], 3), arr(&[4], 4)], |t, ids| {
        let y = t.add_bias(ids[0], ids[1]);
        scalarize(t, y, 13)
    });
    run("scale", &[arr(&[2, 5], 5)], |t, ids| {
        let y = t.scale(ids[0], -1.7);
        scalarize(t, y, 14)
    });
    run(
        "mul_scalar_node",
        &[arr(&[2, 3], 6), Array::scalar(0.7)],
        |t, ids| {
            let y = t.mul_scalar_node(ids[0], ids[1]);
            scalarize(t, y, 15)
        },
    );
}

pub fn matmul_ops() {
    run("matmul", &[arr(&[3, 4], 7), arr(&[4, 2], 8)], |t, ids| {
        let y = t.matmul(ids[0], ids[1]);
        scalarize(t, y, 16)
    });
    run(
        "batched_matmul",
        &[arr(&[2, 3, 4], 9), arr(&[2, 4, 2], 17)],
        |t, ids| {
            let y = t.batched_matmul(ids[0], ids[1]);
            scalarize(t, y, 18)
        },
    );
}

pub fn activations() {
    run("relu", &[arr_off_zero(&[3, 4], 19)], |t, ids| {
        let y = t.relu(ids[0]);
        scalarize(t, y, 20)
    });
    run("gelu", &[arr(&[3, 4], 21)], |t, ids| {
        let y = t.gelu(ids[0]);
        scalarize(t, y, 22)
    });
    run("tanh", &[arr(&[3, 4], 23)], |t, ids| {
        let y = t.tanh(ids[0]);
        scalarize(t, y, 24)
    });
    run("sigmoid", &[arr(&[3, 4], 25)], |t, ids| {
        let y = t.sigmoid(ids[0]);
        scalarize(t, y, 26)
    });
    run("exp", &[arr(&[3, 4], 27)], |t, ids| {
        let y = t.exp(ids[0]);
        scalarize(t, y, 28)
    });
}

pub fn softmax_and_norms() {
    run("softmax", &[arr(&[3, 5], 29)], |t, ids| {
        let y = t.softmax(ids[0]);
        scalarize(t, y, 30)
    });
    run(
        "layer_norm",
        &[arr(&[3, 6], 31), arr(&[6], 32), arr(&[6], 33)],
        |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5);
            scalarize(t, y, 34)
        },
    );
    run("l2_normalize_rows", &[arr(&[3, 5], 35)], |t, ids| {
        let y = t.l2_normalize_rows(ids[0]);
        scalarize(t, y, 36)
    });
}

pub fn convolutions() {
    run(
        "conv2d",
        &[arr(&[2, 2, 6, 8], 37), arr(&[3, 2, 4, 4], 38), arr(&[3], 39)],
        |t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], 2, 1);
            scalarize(t, y, 40)
        },
    );
    run(
        "conv_transpose2d",
        &[arr(&[2, 3, 3, 4], 41), arr(&[3, 2, 4, 4], 42), arr(&[2], 43)],
        |t, ids| {
            let y = t.conv_transpose2d(ids[0], ids[1], ids[2], 2, 1);
            scalarize(t, y, 44)
        },
    );
}

pub fn reductions_and_losses() {
    run("sum", &[arr(&[4, 3], 45)], |t, ids| t.sum(ids[0]));
    run("mean", &[arr(&[4, 3], 46)], |t, ids| t.mean(ids[0]));
    run("mse", &[arr(&[4, 3], 47), arr(&[4, 3], 48)], |t, ids| {
        t.mse(ids[0], ids[1])
    });
    run("cross_entropy_logits", &[arr(&[3, 6], 49)], |t, ids| {
        t.cross_entropy_logits(ids[0], &[1, 4, 0])
    });
    let targets = Array::new(vec![3, 4], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    run("bce_logits", &[arr(&[3, 4], 50)], |t, ids| {
        t.bce_logits(ids[0], &targets)
    });
}

pub fn structural_ops() {
    run("reshape", &[arr(&[2, 6], 51)], |t, ids| {
        let y = t.reshape(ids[0], vec![3, 4]);
        scalarize(t, y, 52)
    });
    run("transpose", &[arr(&[2, 3, 4], 53)], |t, ids| {
        let y = t.transpose(ids[0], &[2, 0, 1]);
        scalarize(t, y, 54)
    });
    run("concat", &[arr(&[2, 3], 55), arr(&[4, 3], 56)], |t, ids| {
        let y = t.concat(&[ids[0], ids[1]], 0);
        scalarize(t, y, 57)
    });
    run("slice_rows", &[arr(&[5, 3], 58)], |t, ids| {
        let y = t.slice_rows(ids[0], 1, 4);
        scalarize(t, y, 59)
    });
    run("mean_pool2d", &[arr(&[2, 3, 4, 5], 60)], |t, ids| {
        let y = t.mean_pool2d(ids[0]);
        scalarize(t, y, 61)
    });
    run("embedding", &[arr(&[6, 4], 62)], |t, ids| {
        let y = t.embedding(ids[0], &[0, 3, 3, 5]);
        scalarize(t, y, 63)
    });
}

pub fn gradient_gates() {
    // stop_gradient: zero everywhere behind it
    let x = arr(&[3, 3], 64);
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone());
    let sg = tape.stop_gradient(xn);
    let loss = tape.sum(sg);
    let mut g = tape.backward(loss);
    assert!(g.take(xn).is_none());

    // straight_through: forwards the quantized value, backpropagates the
    // downstream gradient one-to-one into the pre-quant input. The estimator
    // is biased by construction, so the finite-difference oracle is the
    // surrogate f(pre + (q - pre)_const), whose exact gradient at pre is
    // what reverse mode must report.
    let pre = arr(&[3, 3], 65);
    let q = arr(&[3, 3], 66);
    let w = arr(&[3, 3], 67);
    let ad = {
        let mut tape = Tape::new();
        let p = tape.leaf(pre.clone());
        let qn = tape.constant(q.clone());
        let st = tape.straight_through(qn, p);
        assert_eq!(tape.value(st).data, q.data, "forward must be the quantized value");
        let wn = tape.constant(w.clone());
        let prod = tape.mul(st, wn);
        let loss = tape.sum(prod);
        let mut g = tape.backward(loss);
        g.take(p).expect("pre-quant gradient missing")
    };
    let surrogate = |pre_v: &Array| -> f64 {
        // q - pre frozen at the base point, so d surrogate / d pre = w
        pre_v
            .data
            .iter()
            .zip(q.data.iter().zip(&pre.data))
            .zip(&w.data)
            .map(|((p, (qv, p0)), wv)| (p + (qv - p0)) * wv)
            .sum()
    };
    for e in 0..pre.len() {
        let mut plus = pre.clone();
        plus.data[e] += H;
        let mut minus = pre.clone();
        minus.data[e] -= H;
        let fd = (surrogate(&plus) - surrogate(&minus)) / (2.0 * H);
        let a = ad.data[e];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
        assert!(rel < TOL, "straight_through[{e}]: ad={a} fd={fd}");
    }
}

pub fn composed_codebook_loss() {
    // Finite differences through encoder weights, codebook rows, and decoder
    // weights of the full three-term loss. The quantization step makes the
    // raw forward piecewise constant along the reconstruction path, so the
    // oracle is the straight-through surrogate: indices frozen at the base
    // point, decoder fed flat + (z_q - flat)_base, stop-gradient factors
    // frozen at their base values. Its exact derivative is what reverse mode
    // computes for this loss family.
    let cfg = Config {
        mel_bands: 16,
        clip_seconds: 0.256, // 32 frames
        conv_channels: 2,
        latent_dim: 4,
        codebook_size: 6,
        ..Config::default()
    };
    let mut store = ParamStore::new();
    let mut rng = Rng::new(68);
    specvqgan::init_vq_model(&mut store, &cfg, &mut rng);
    let x_in = Array::uniform(&[1, 1, 16, 32], -0.8, 0.8, &mut rng);

    // base-point quantities
    let (base_indices, flat_base, zq_base) = {
        let mut tape = Tape::new();
        let x = tape.constant(x_in.clone());
        let mut ctx = NetCtx::frozen(&mut tape, &store);
        let fwd = specvqgan::vq_forward(&mut ctx, &cfg, x).unwrap();
        (
            fwd.indices.clone(),
            tape.value(fwd.flat).clone(),
            tape.value(fwd.z_q).clone(),
        )
    };
    let n_z = cfg.latent_dim;
    let cells = flat_base.dim(0);

    let forward = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(x_in.clone());
        // encoder output under the perturbed parameters
        let flat_v = {
            let mut ctx = NetCtx::frozen(&mut tape, store);
            let z = specvqgan::encode(&mut ctx, x);
            let p = ctx.tape.transpose(z, &[0, 2, 3, 1]);
            let f = ctx.tape.reshape(p, vec![cells, n_z]);
            tape.value(f).clone()
        };
        // reconstruction through the surrogate decoder input
        let mut dec_in = flat_v.clone();
        for (d, (q, f)) in dec_in.data.iter_mut().zip(zq_base.data.iter().zip(&flat_base.data)) {
            *d += q - f;
        }
        let rec = {
            let mut tape2 = Tape::new();
            let x2 = tape2.constant(x_in.clone());
            let z = tape2.constant(dec_in.reshaped(vec![
                1,
                cfg.latent_rows(),
                cfg.latent_cols(),
                n_z,
            ]));
            let z = tape2.transpose(z, &[0, 3, 1, 2]);
            let mut ctx = NetCtx::frozen(&mut tape2, store);
            let r = specvqgan::decode(&mut ctx, z);
            let l = ctx.tape.mse(r, x2);
            tape2.value(l).item()
        };
        // codebook term: flat frozen by sg, rows from the perturbed book
        let cb = &store.get("codebook").value;
        let mut t2 = 0.0;
        let mut t3 = 0.0;
        for (i, &idx) in base_indices.iter().enumerate() {
            for k in 0..n_z {
                let zq = cb.data[idx * n_z + k];
                let d2 = flat_base.data[i * n_z + k] - zq;
                t2 += d2 * d2;
                let d3 = zq_base.data[i * n_z + k] - flat_v.data[i * n_z + k];
                t3 += d3 * d3;
            }
        }
        let n = (cells * n_z) as f64;
        rec + t2 / n + cfg.beta * t3 / n
    };

    // reverse-mode gradients
    let mut tape = Tape::new();
    let mut bound = BoundParams::default();
    let x = tape.constant(x_in.clone());
    let fwd = {
        let mut ctx = NetCtx::trainable(&mut tape, &store, &mut bound);
        specvqgan::vq_forward(&mut ctx, &cfg, x).unwrap()
    };
    let nodes = specvqgan::vq_loss(&mut tape, x, &fwd, cfg.beta);
    let mut grads = tape.backward(nodes.total);

    let mut checked = 0usize;
    for (name, id) in bound.iter() {
        let g = match grads.take(*id) {
            Some(g) => g,
            None => continue,
        };
        let base = store.get(name).value.clone();
        // probe a deterministic sample of elements per tensor
        let stride = (base.len() / 8).max(1);
        for e in (0..base.len()).step_by(stride) {
            let mut s_plus = store.subset("");
            s_plus.get_mut(name).value.data[e] = base.data[e] + H;
            let mut s_minus = store.subset("");
            s_minus.get_mut(name).value.data[e] = base.data[e] - H;
            let fd = (forward(&s_plus) - forward(&s_minus)) / (2.0 * H);
            let a = g.data[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            assert!(
                rel < TOL,
                "vq loss: {name}[{e}]: ad={a} fd={fd} rel={rel}"
            );
            checked += 1;
        }
    }
    assert!(checked >= 30, "too few elements probed: {checked}");
}

pub fn transformer_block_composed() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(70);
    nn::init_transformer_block(&mut store, "blk", 8, &mut rng);
    let x_in = Array::uniform(&[4, 8], -0.5, 0.5, &mut rng);
    run("transformer_block", &[x_in], |t, ids| {
        let mask = t.constant(nn::mask_array(2, |q, k| k <= q, 4));
        let mut ctx = NetCtx::frozen(t, &store);
        let y = nn::transformer_block(&mut ctx, "blk", ids[0], 2, mask);
        scalarize(t, y, 71)
    });
}

/// Run the complete suite; used by the acceptance gate to time it as a whole.
pub fn run_all() {
    elementwise_binary_ops();
    bias_scale_and_scalar_gate();
    matmul_ops();
    activations();
    softmax_and_norms();
    convolutions();
    reductions_and_losses();
    structural_ops();
    gradient_gates();
    composed_codebook_loss();
    transformer_block_composed();
}
