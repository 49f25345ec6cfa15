//! Shared network-building helpers on top of the tape: linear layers,
//! pre-norm transformer blocks, and parameter initialization.

use crate::array::Array;
use crate::optim::{BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};

pub const LN_EPS: f64 = 1e-5;

/// Builder context for one forward pass. With `bound` set, parameters are
/// trainable leaves; without it they are frozen constants.
pub struct NetCtx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub bound: Option<&'a mut BoundParams>,
}

impl<'a> NetCtx<'a> {
    pub fn trainable(
        tape: &'a mut Tape,
        store: &'a ParamStore,
        bound: &'a mut BoundParams,
    ) -> NetCtx<'a> {
        NetCtx {
            tape,
            store,
            bound: Some(bound),
        }
    }

    pub fn frozen(tape: &'a mut Tape, store: &'a ParamStore) -> NetCtx<'a> {
        NetCtx {
            tape,
            store,
            bound: None,
        }
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        match &mut self.bound {
            Some(b) => self.store.bind(self.tape, b, name),
            None => self.store.bind_frozen(self.tape, name),
        }
    }
}

pub fn init_linear(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) {
    store.init_uniform(&format!("{name}.w"), &[d_in, d_out], d_in, rng);
    store.init_zeros(&format!("{name}.b"), &[d_out]);
}

pub fn linear(ctx: &mut NetCtx, name: &str, x: NodeId) -> NodeId {
    let w = ctx.param(&format!("{name}.w"));
    let b = ctx.param(&format!("{name}.b"));
    let y = ctx.tape.matmul(x, w);
    ctx.tape.add_bias(y, b)
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(&format!("{name}.g"), Array::full(&[d], 1.0));
    store.init_zeros(&format!("{name}.b"), &[d]);
}

pub fn layer_norm(ctx: &mut NetCtx, name: &str, x: NodeId) -> NodeId {
    let g = ctx.param(&format!("{name}.g"));
    let b = ctx.param(&format!("{name}.b"));
    ctx.tape.layer_norm(x, g, b, LN_EPS)
}

pub fn init_conv(
    store: &mut ParamStore,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut Rng,
) {
    let fan_in = c_in * k * k;
    store.init_uniform(&format!("{name}.w"), &[c_out, c_in, k, k], fan_in, rng);
    store.init_zeros(&format!("{name}.b"), &[c_out]);
}

pub fn conv(ctx: &mut NetCtx, name: &str, x: NodeId, stride: usize, pad: usize) -> NodeId {
    let w = ctx.param(&format!("{name}.w"));
    let b = ctx.param(&format!("{name}.b"));
    ctx.tape.conv2d(x, w, b, stride, pad)
}

pub fn init_conv_transpose(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut Rng,
) {
    let fan_in = c_in * k * k;
    store.init_uniform(&format!("{name}.w"), &[c_in, c_out, k, k], fan_in, rng);
    store.init_zeros(&format!("{name}.b"), &[c_out]);
}

pub fn conv_transpose(ctx: &mut NetCtx, name: &str, x: NodeId, stride: usize, pad: usize) -> NodeId {
    let w = ctx.param(&format!("{name}.w"));
    let b = ctx.param(&format!("{name}.b"));
    ctx.tape.conv_transpose2d(x, w, b, stride, pad)
}

pub fn init_transformer_block(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut Rng) {
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    init_linear(store, &format!("{prefix}.wq"), d, d, rng);
    init_linear(store, &format!("{prefix}.wk"), d, d, rng);
    init_linear(store, &format!("{prefix}.wv"), d, d, rng);
    init_linear(store, &format!("{prefix}.wo"), d, d, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    init_linear(store, &format!("{prefix}.mlp1"), d, 2 * d, rng);
    init_linear(store, &format!("{prefix}.mlp2"), 2 * d, d, rng);
}

/// Additive attention mask [heads, s, s]: 0.0 where key visible, -1e9 where
/// masked, shared across heads.
pub fn mask_array(heads: usize, visible: impl Fn(usize, usize) -> bool, s: usize) -> Array {
    let mut m = vec![0.0; heads * s * s];
    for q in 0..s {
        for k in 0..s {
            if !visible(q, k) {
                for h in 0..heads {
                    m[(h * s + q) * s + k] = -1e9;
                }
            }
        }
    }
    Array::new(vec![heads, s, s], m)
}

/// One pre-norm transformer block over x [s, d] with an additive mask
/// constant of shape [heads, s, s].
pub fn transformer_block(
    ctx: &mut NetCtx,
    prefix: &str,
    x: NodeId,
    heads: usize,
    mask: NodeId,
) -> NodeId {
    let (s, d) = {
        let v = ctx.tape.value(x);
        (v.dim(0), v.dim(1))
    };
    let dh = d / heads;
    let h = layer_norm(ctx, &format!("{prefix}.ln1"), x);
    let q = linear(ctx, &format!("{prefix}.wq"), h);
    let k = linear(ctx, &format!("{prefix}.wk"), h);
    let v = linear(ctx, &format!("{prefix}.wv"), h);
    // [s,d] -> [heads, s, dh]
    let to_heads = |ctx: &mut NetCtx, t: NodeId| {
        let r = ctx.tape.reshape(t, vec![s, heads, dh]);
        ctx.tape.transpose(r, &[1, 0, 2])
    };
    let qh = to_heads(ctx, q);
    let kh = to_heads(ctx, k);
    let vh = to_heads(ctx, v);
    let kt = ctx.tape.transpose(kh, &[0, 2, 1]);
    let scores = ctx.tape.batched_matmul(qh, kt);
    let scaled = ctx.tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let masked = ctx.tape.add(scaled, mask);
    let att = ctx.tape.softmax(masked);
    let ctxh = ctx.tape.batched_matmul(att, vh);
    let merged = ctx.tape.transpose(ctxh, &[1, 0, 2]);
    let merged = ctx.tape.reshape(merged, vec![s, d]);
    let proj = linear(ctx, &format!("{prefix}.wo"), merged);
    let x = ctx.tape.add(x, proj);

    let h2 = layer_norm(ctx, &format!("{prefix}.ln2"), x);
    let m1 = linear(ctx, &format!("{prefix}.mlp1"), h2);
    let act = ctx.tape.gelu(m1);
    let m2 = linear(ctx, &format!("{prefix}.mlp2"), act);
    ctx.tape.add(x, m2)
}
