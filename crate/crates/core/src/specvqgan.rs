//! Discrete spectrogram codebook stage: encoder, vector quantizer, decoder,
//! patch discriminator, and the combined training loss (reconstruction +
//! codebook + commitment + adversarial + perceptual). Quantization is
//! nondifferentiable; gradients cross it via the straight-through estimator
//! while stop-gradient terms place codebook and commitment pressure.

use crate::array::Array;
use crate::config::Config;
use crate::dsp::MelSpectrogram;
use crate::error::{Result, SvqaError};
use crate::nn::{self, NetCtx};
use crate::optim::{AdamConfig, BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};

/// Running code-usage counters, reset at epoch boundaries.
#[derive(Debug, Clone)]
pub struct CodebookState {
    pub usage: Vec<u64>,
}

impl CodebookState {
    pub fn new(l: usize) -> CodebookState {
        CodebookState { usage: vec![0; l] }
    }

    pub fn reset(&mut self) {
        self.usage.iter_mut().for_each(|c| *c = 0);
    }

    pub fn observe(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage[i] += 1;
        }
    }
}

/// Exponentiated entropy of the empirical code distribution, in [1, L].
pub fn codebook_perplexity(usage: &[u64]) -> f64 {
    let total: u64 = usage.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let mut entropy = 0.0;
    for &c in usage {
        if c > 0 {
            let p = c as f64 / total as f64;
            entropy -= p * p.ln();
        }
    }
    entropy.exp()
}

/// Nearest-codebook-row assignment for flat latents [N, n_z] against entries
/// [L, n_z]. Ties break toward the lowest index.
pub fn quantize(flat: &Array, entries: &Array) -> Result<Vec<usize>> {
    if entries.rank() != 2 || entries.dim(0) == 0 {
        return Err(SvqaError::InvalidArgument("empty codebook".into()));
    }
    let n_z = entries.dim(1);
    if flat.rank() != 2 || flat.dim(1) != n_z {
        return Err(SvqaError::InvalidArgument(format!(
            "latent width {} does not match codebook width {}",
            flat.dim(1),
            n_z
        )));
    }
    let l = entries.dim(0);
    let n = flat.dim(0);
    let mut out = vec![0usize; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let cell = &flat.data[i * n_z..(i + 1) * n_z];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for row in 0..l {
            let e = &entries.data[row * n_z..(row + 1) * n_z];
            let mut d = 0.0;
            for k in 0..n_z {
                let diff = cell[k] - e[k];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = row;
            }
        }
        *slot = best;
    }
    Ok(out)
}

/// Reassign rarely used codebook rows to random encoder outputs from the
/// last batch. Returns the number of rows restarted.
pub fn dead_code_restart(
    store: &mut ParamStore,
    state: &CodebookState,
    last_flat: &Array,
    threshold: u64,
    rng: &mut Rng,
) -> usize {
    let n_z = last_flat.dim(1);
    let n = last_flat.dim(0);
    let mut restarted = 0;
    let cb = &mut store.get_mut("codebook").value;
    for (row, &count) in state.usage.iter().enumerate() {
        if count < threshold {
            let src = rng.below(n);
            cb.data[row * n_z..(row + 1) * n_z]
                .copy_from_slice(&last_flat.data[src * n_z..(src + 1) * n_z]);
            restarted += 1;
        }
    }
    restarted
}

// ---------------------------------------------------------------------------
// Networks

const K: usize = 4; // conv kernel, stride 2, pad 1 -> exact 2x per block

pub fn init_vq_model(store: &mut ParamStore, cfg: &Config, rng: &mut Rng) {
    let c = cfg.conv_channels;
    nn::init_conv(store, "enc.conv0", c, 1, K, rng);
    nn::init_conv(store, "enc.conv1", 2 * c, c, K, rng);
    nn::init_conv(store, "enc.conv2", cfg.latent_dim, 2 * c, K, rng);
    nn::init_conv_transpose(store, "dec.convt0", cfg.latent_dim, 2 * c, K, rng);
    nn::init_conv_transpose(store, "dec.convt1", 2 * c, c, K, rng);
    nn::init_conv_transpose(store, "dec.convt2", c, 1, K, rng);
    store.init_uniform(
        "codebook",
        &[cfg.codebook_size, cfg.latent_dim],
        cfg.latent_dim,
        rng,
    );
}

pub fn init_discriminator(store: &mut ParamStore, cfg: &Config, rng: &mut Rng) {
    let c = cfg.conv_channels;
    nn::init_conv(store, "disc.conv0", c, 1, K, rng);
    nn::init_conv(store, "disc.conv1", 2 * c, c, K, rng);
    nn::init_conv(store, "disc.conv2", 1, 2 * c, K, rng);
}

/// Encoder: [B,1,M,T] -> [B, n_z, M/8, T/8].
pub fn encode(ctx: &mut NetCtx, x: NodeId) -> NodeId {
    let h = nn::conv(ctx, "enc.conv0", x, 2, 1);
    let h = ctx.tape.relu(h);
    let h = nn::conv(ctx, "enc.conv1", h, 2, 1);
    let h = ctx.tape.relu(h);
    nn::conv(ctx, "enc.conv2", h, 2, 1)
}

/// Decoder: [B, n_z, m, t] -> [B,1,M,T], squashed to [-1,1].
pub fn decode(ctx: &mut NetCtx, z_q: NodeId) -> NodeId {
    let h = nn::conv_transpose(ctx, "dec.convt0", z_q, 2, 1);
    let h = ctx.tape.relu(h);
    let h = nn::conv_transpose(ctx, "dec.convt1", h, 2, 1);
    let h = ctx.tape.relu(h);
    let h = nn::conv_transpose(ctx, "dec.convt2", h, 2, 1);
    ctx.tape.tanh(h)
}

/// Patch discriminator: [B,1,M,T] -> [B,1,P,Q] per-patch logits.
pub fn discriminator_forward(ctx: &mut NetCtx, x: NodeId) -> NodeId {
    let h = nn::conv(ctx, "disc.conv0", x, 2, 1);
    let h = ctx.tape.relu(h);
    let h = nn::conv(ctx, "disc.conv1", h, 2, 1);
    let h = ctx.tape.relu(h);
    nn::conv(ctx, "disc.conv2", h, 2, 1)
}

/// One autoencoder forward pass with quantization.
pub struct VqForward {
    /// Encoder output as flat rows [B*m*t, n_z], still on the tape.
    pub flat: NodeId,
    /// Chosen codebook rows per cell, row-major over (b, i, j).
    pub indices: Vec<usize>,
    /// Quantized latents [B*m*t, n_z] (exact codebook rows, on the tape).
    pub z_q: NodeId,
    /// Reconstruction [B,1,M,T].
    pub recon: NodeId,
}

/// Encoder -> quantize -> straight-through -> decoder.
pub fn vq_forward(ctx: &mut NetCtx, cfg: &Config, x: NodeId) -> Result<VqForward> {
    let b = ctx.tape.value(x).dim(0);
    let (m, t) = (cfg.latent_rows(), cfg.latent_cols());
    let z = encode(ctx, x);
    // [B,n_z,m,t] -> [B,m,t,n_z] -> [B*m*t, n_z]
    let perm = ctx.tape.transpose(z, &[0, 2, 3, 1]);
    let flat = ctx.tape.reshape(perm, vec![b * m * t, cfg.latent_dim]);
    let indices = quantize(ctx.tape.value(flat), &ctx.store.get("codebook").value)?;
    let cb = ctx.param("codebook");
    let z_q = ctx.tape.embedding(cb, &indices);
    let st = ctx.tape.straight_through(z_q, flat);
    let grid = ctx.tape.reshape(st, vec![b, m, t, cfg.latent_dim]);
    let grid = ctx.tape.transpose(grid, &[0, 3, 1, 2]);
    let recon = decode(ctx, grid);
    Ok(VqForward {
        flat,
        indices,
        z_q,
        recon,
    })
}

/// The three VQ loss terms as tape nodes.
pub struct VqLossNodes {
    pub reconstruction: NodeId,
    pub codebook_term: NodeId,
    /// Already weighted by beta.
    pub commitment_term: NodeId,
    pub total: NodeId,
}

/// reconstruction + ||sg[z] - z_q||^2 + beta * ||sg[z_q] - z||^2, all means
/// over elements. Stop-gradient placement keeps the codebook term off the
/// encoder and the commitment term off the codebook.
pub fn vq_loss(tape: &mut Tape, x: NodeId, fwd: &VqForward, beta: f64) -> VqLossNodes {
    let reconstruction = tape.mse(fwd.recon, x);
    let sg_z = tape.stop_gradient(fwd.flat);
    let codebook_term = tape.mse(sg_z, fwd.z_q);
    let sg_q = tape.stop_gradient(fwd.z_q);
    let commit_raw = tape.mse(sg_q, fwd.flat);
    let commitment_term = tape.scale(commit_raw, beta);
    let s = tape.add(reconstruction, codebook_term);
    let total = tape.add(s, commitment_term);
    VqLossNodes {
        reconstruction,
        codebook_term,
        commitment_term,
        total,
    }
}

/// Scale-s feature MSEs weighted by 1/(B * M_s * T_s), summed over scales.
pub fn perceptual_term(tape: &mut Tape, real_scales: &[NodeId], gen_scales: &[NodeId]) -> NodeId {
    assert_eq!(real_scales.len(), gen_scales.len());
    let mut acc: Option<NodeId> = None;
    for (&r, &g) in real_scales.iter().zip(gen_scales) {
        let (b, h, w) = {
            let v = tape.value(r);
            (v.dim(0), v.dim(2), v.dim(3))
        };
        let d = tape.sub(r, g);
        let sq = tape.mul(d, d);
        let s = tape.sum(sq);
        let term = tape.scale(s, 1.0 / (b * h * w) as f64);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    acc.expect("at least one scale")
}

/// Scalar values of every loss component for one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct VqLossBreakdown {
    pub reconstruction: f64,
    pub codebook_term: f64,
    pub commitment_term: f64,
    pub adversarial_g: f64,
    pub adversarial_d: f64,
    pub perceptual: f64,
    pub total: f64,
}

/// Effective adversarial weight at a step: zero while warming up.
pub fn adv_weight(cfg: &Config, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        0.0
    } else {
        cfg.lambda_adv
    }
}

/// Full generator-side loss of one batch. `clf` (when given) provides the
/// perceptual features; `disc` enables the non-saturating adversarial term
/// after warm-up. Returns the total node and the component values.
pub fn specvqgan_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &Config,
    x: NodeId,
    fwd: &VqForward,
    clf: Option<&ParamStore>,
    step: usize,
) -> (NodeId, VqLossBreakdown) {
    let nodes = vq_loss(tape, x, fwd, cfg.beta);
    let mut total = nodes.total;
    let mut bd = VqLossBreakdown {
        reconstruction: tape.value(nodes.reconstruction).item(),
        codebook_term: tape.value(nodes.codebook_term).item(),
        commitment_term: tape.value(nodes.commitment_term).item(),
        ..Default::default()
    };
    let w_adv = adv_weight(cfg, step);
    if store.contains("disc.conv0.w") {
        // Generator wants reconstructions classified real; discriminator
        // weights stay frozen in this graph.
        let mut dctx = NetCtx::frozen(tape, store);
        let logits = discriminator_forward(&mut dctx, fwd.recon);
        let ones = Array::full(&tape.value(logits).shape.clone(), 1.0);
        let g = tape.bce_logits(logits, &ones);
        bd.adversarial_g = tape.value(g).item();
        if w_adv > 0.0 {
            let weighted = tape.scale(g, w_adv);
            total = tape.add(total, weighted);
        }
    }
    if let Some(clf_store) = clf {
        let real_scales = {
            let mut cctx = NetCtx::frozen(tape, clf_store);
            crate::eval::classifier_scales(&mut cctx, x)
        };
        let gen_scales = {
            let mut cctx = NetCtx::frozen(tape, clf_store);
            crate::eval::classifier_scales(&mut cctx, fwd.recon)
        };
        let perc = perceptual_term(tape, &real_scales, &gen_scales);
        bd.perceptual = tape.value(perc).item();
        let weighted = tape.scale(perc, cfg.lambda_perc);
        total = tape.add(total, weighted);
    }
    bd.total = tape.value(total).item();
    (total, bd)
}

/// Stack [M,T] spectrogram arrays into a conv input [B,1,M,T].
pub fn stack_mels(tape: &mut Tape, mels: &[&Array]) -> NodeId {
    let (m, t) = (mels[0].dim(0), mels[0].dim(1));
    let mut data = Vec::with_capacity(mels.len() * m * t);
    for a in mels {
        assert_eq!(a.shape, vec![m, t], "inconsistent spectrogram shapes");
        data.extend_from_slice(&a.data);
    }
    tape.constant(Array::new(vec![mels.len(), 1, m, t], data))
}

/// One discriminator update on a (real, reconstruction) pair of batches.
fn discriminator_step(
    store: &mut ParamStore,
    real: &Array,
    fake: &Array,
    adam: &AdamConfig,
) -> f64 {
    let mut tape = Tape::new();
    let mut bound = BoundParams::default();
    let real_n = tape.constant(real.clone());
    let fake_n = tape.constant(fake.clone());
    let mut ctx = NetCtx::trainable(&mut tape, store, &mut bound);
    let lr = discriminator_forward(&mut ctx, real_n);
    let lf = discriminator_forward(&mut ctx, fake_n);
    let shape = tape.value(lr).shape.clone();
    let ones = Array::full(&shape, 1.0);
    let zeros = Array::zeros(&shape);
    let loss_r = tape.bce_logits(lr, &ones);
    let loss_f = tape.bce_logits(lf, &zeros);
    let s = tape.add(loss_r, loss_f);
    let loss = tape.scale(s, 0.5);
    let v = tape.value(loss).item();
    let mut grads = tape.backward(loss);
    store.apply_gradients(&bound, &mut grads, adam);
    v
}

const RESTART_EVERY: usize = 200;
const RESTART_THRESHOLD: u64 = 1;

/// First-stage training loop. `store` must hold enc/dec/codebook/disc
/// parameters; `clf` is the frozen perceptual classifier (optional).
/// `log` receives (global step, breakdown) once per step.
pub fn train_codebook(
    store: &mut ParamStore,
    cfg: &Config,
    mels: &[Array],
    clf: Option<&ParamStore>,
    steps: usize,
    start_step: usize,
    mut log: impl FnMut(usize, &VqLossBreakdown),
) -> Result<()> {
    if mels.is_empty() {
        return Err(SvqaError::InvalidArgument("no training spectrograms".into()));
    }
    let mut rng = Rng::new(cfg.seed).fork(0xc0de);
    let mut state = CodebookState::new(cfg.codebook_size);
    for local in 0..steps {
        let step = start_step + local;
        let adam = AdamConfig {
            lr: crate::optim::cosine_lr(cfg.lr, local, steps),
            ..Default::default()
        };
        let batch: Vec<&Array> = (0..cfg.batch).map(|_| &mels[rng.below(mels.len())]).collect();

        let mut tape = Tape::new();
        let mut bound = BoundParams::default();
        let x = stack_mels(&mut tape, &batch);
        let fwd = {
            let mut ctx = NetCtx::trainable(&mut tape, store, &mut bound);
            vq_forward(&mut ctx, cfg, x)?
        };
        state.observe(&fwd.indices);
        let (total, mut bd) = specvqgan_loss(&mut tape, store, cfg, x, &fwd, clf, step);
        tape.validate_finite()?;
        let recon_value = tape.value(fwd.recon).clone();
        let flat_value = tape.value(fwd.flat).clone();
        let mut grads = tape.backward(total);
        store.apply_gradients(&bound, &mut grads, &adam);

        let real = tape.value(x).clone();
        bd.adversarial_d = discriminator_step(store, &real, &recon_value, &adam);
        log(step, &bd);

        if (local + 1) % RESTART_EVERY == 0 {
            dead_code_restart(store, &state, &flat_value, RESTART_THRESHOLD, &mut rng);
            state.reset();
        }
    }
    Ok(())
}

/// Frozen reconstruction of a single spectrogram (used by evaluation).
pub fn reconstruct_mel(store: &ParamStore, cfg: &Config, mel: &Array) -> Result<MelSpectrogram> {
    let mut tape = Tape::new();
    let x = stack_mels(&mut tape, &[mel]);
    let mut ctx = NetCtx::frozen(&mut tape, store);
    let fwd = vq_forward(&mut ctx, cfg, x)?;
    let v = tape.value(fwd.recon);
    Ok(MelSpectrogram {
        values: v.reshaped(vec![cfg.mel_bands, cfg.frames()]),
    })
}

/// Frozen encode+quantize of a single spectrogram to codebook indices,
/// row-major over the (m, t) grid.
pub fn encode_indices(store: &ParamStore, cfg: &Config, mel: &Array) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let x = stack_mels(&mut tape, &[mel]);
    let mut ctx = NetCtx::frozen(&mut tape, store);
    let z = encode(&mut ctx, x);
    let perm = ctx.tape.transpose(z, &[0, 2, 3, 1]);
    let flat = ctx
        .tape
        .reshape(perm, vec![cfg.latent_rows() * cfg.latent_cols(), cfg.latent_dim]);
    quantize(tape.value(flat), &store.get("codebook").value)
}
