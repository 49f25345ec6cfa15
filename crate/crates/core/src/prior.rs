//! Text-conditioned autoregressive transformer over codebook indices.
//! Spectrogram index grids are flattened column-major into sequences; the
//! prior models p(s_i | s_<i, text) with the text feature rows prepended as
//! a fully visible prefix, and samples with temperature plus Top-K clipping.

use crate::array::Array;
use crate::config::{Config, TextMode};
use crate::dsp::{self, GriffinLimResult, MelFilterbank, MelSpectrogram, Waveform};
use crate::error::{Result, SvqaError};
use crate::nn::{self, NetCtx};
use crate::optim::{AdamConfig, BoundParams, ParamStore};
use crate::rng::Rng;
use crate::specvqgan;
use crate::tape::{NodeId, Tape};
use crate::text::{self, TextEncoderCfg};

/// m x t grid of codebook indices, stored row-major: grid(i, j) at i*t + j.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexGrid {
    pub m: usize,
    pub t: usize,
    pub indices: Vec<usize>,
}

/// Column-major flattening: sequence slot j*m + i holds grid(i, j).
pub fn flatten(grid: &IndexGrid) -> Vec<usize> {
    let mut s = vec![0usize; grid.m * grid.t];
    for i in 0..grid.m {
        for j in 0..grid.t {
            s[j * grid.m + i] = grid.indices[i * grid.t + j];
        }
    }
    s
}

pub fn unflatten(s: &[usize], m: usize, t: usize) -> Result<IndexGrid> {
    if s.len() != m * t {
        return Err(SvqaError::InvalidArgument(format!(
            "sequence length {} does not match {m}x{t} grid",
            s.len()
        )));
    }
    let mut indices = vec![0usize; m * t];
    for i in 0..m {
        for j in 0..t {
            indices[i * t + j] = s[j * m + i];
        }
    }
    Ok(IndexGrid { m, t, indices })
}

/// Replace each index by its codebook row: m x t grid -> [m, t, n_z] latents.
pub fn lookup(grid: &IndexGrid, entries: &Array) -> Result<Array> {
    let (l, n_z) = (entries.dim(0), entries.dim(1));
    let mut data = Vec::with_capacity(grid.indices.len() * n_z);
    for &idx in &grid.indices {
        if idx >= l {
            return Err(SvqaError::InvalidArgument(format!(
                "index {idx} out of range for codebook of {l}"
            )));
        }
        data.extend_from_slice(&entries.data[idx * n_z..(idx + 1) * n_z]);
    }
    Ok(Array::new(vec![grid.m, grid.t, n_z], data))
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct PriorCfg {
    /// Codebook size; the BOS token gets id `l`.
    pub l: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Generated sequence length m*t.
    pub seq_len: usize,
    /// Longest supported conditioning prefix (text feature rows).
    pub max_prefix: usize,
}

impl PriorCfg {
    pub fn from_config(cfg: &Config) -> PriorCfg {
        PriorCfg {
            l: cfg.codebook_size,
            dim: cfg.prior_width,
            layers: cfg.prior_layers,
            heads: cfg.prior_heads,
            seq_len: cfg.latent_rows() * cfg.latent_cols(),
            max_prefix: cfg.max_text_len,
        }
    }

    pub fn bos(&self) -> usize {
        self.l
    }
}

pub fn init_prior(store: &mut ParamStore, cfg: &PriorCfg, rng: &mut Rng) {
    store.init_uniform("prior.tok_emb", &[cfg.l + 1, cfg.dim], cfg.dim, rng);
    store.init_uniform("prior.pos_prefix", &[cfg.max_prefix, cfg.dim], cfg.dim, rng);
    store.init_uniform("prior.pos_seq", &[cfg.seq_len, cfg.dim], cfg.dim, rng);
    for i in 0..cfg.layers {
        nn::init_transformer_block(store, &format!("prior.blk{i}"), cfg.dim, rng);
    }
    nn::init_layer_norm(store, "prior.ln_f", cfg.dim);
    nn::init_linear(store, "prior.head", cfg.dim, cfg.l, rng);
}

/// Next-token logits [n, L] for a prefix of text feature rows plus BOS and
/// the first n-1 generated tokens. Prefix rows are visible to every
/// position; generated positions attend causally.
pub fn prior_logits(ctx: &mut NetCtx, cfg: &PriorCfg, feat: NodeId, tokens: &[usize]) -> NodeId {
    let p = ctx.tape.value(feat).dim(0);
    assert!(p <= cfg.max_prefix, "prefix longer than the position table");
    let n = tokens.len() + 1; // BOS + teacher tokens
    let mut ids = Vec::with_capacity(n);
    ids.push(cfg.bos());
    ids.extend_from_slice(tokens);

    let tok_w = ctx.param("prior.tok_emb");
    let tok = ctx.tape.embedding(tok_w, &ids);
    let pos_seq_w = ctx.param("prior.pos_seq");
    let pos_seq = ctx.tape.embedding(pos_seq_w, &(0..n).collect::<Vec<_>>());
    let gen = ctx.tape.add(tok, pos_seq);

    let pos_pre_w = ctx.param("prior.pos_prefix");
    let pos_pre = ctx.tape.embedding(pos_pre_w, &(0..p).collect::<Vec<_>>());
    let pre = ctx.tape.add(feat, pos_pre);

    let mut x = ctx.tape.concat(&[pre, gen], 0);
    let s = p + n;
    let mask = ctx
        .tape
        .constant(nn::mask_array(cfg.heads, |q, k| k < p || k <= q, s));
    for i in 0..cfg.layers {
        x = nn::transformer_block(ctx, &format!("prior.blk{i}"), x, cfg.heads, mask);
    }
    let x = nn::layer_norm(ctx, "prior.ln_f", x);
    let x = ctx.tape.slice_rows(x, p, s);
    nn::linear(ctx, "prior.head", x)
}

/// Teacher-forced mean negative log-likelihood of a full index sequence.
pub fn sequence_nll(
    ctx: &mut NetCtx,
    cfg: &PriorCfg,
    feat: NodeId,
    s: &[usize],
) -> Result<NodeId> {
    if s.len() != cfg.seq_len {
        return Err(SvqaError::InvalidArgument(format!(
            "sequence length {} != m*t = {}",
            s.len(),
            cfg.seq_len
        )));
    }
    if let Some(&bad) = s.iter().find(|&&i| i >= cfg.l) {
        return Err(SvqaError::InvalidArgument(format!(
            "index {bad} out of codebook range {}",
            cfg.l
        )));
    }
    let logits = prior_logits(ctx, cfg, feat, &s[..s.len() - 1]);
    Ok(ctx.tape.cross_entropy_logits(logits, s))
}

/// Temperature + Top-K next-token draw from raw logits. Ties order by index.
/// Returns the sampled id; the id always lies in the Top-K support set.
pub fn sample_from_logits(logits: &[f64], cfg: &SamplerConfig, rng: &mut Rng) -> usize {
    assert!(cfg.temperature > 0.0, "temperature must be positive");
    let k = cfg.top_k.clamp(1, logits.len());
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let top = &order[..k];
    if k == 1 {
        return top[0];
    }
    let max = logits[top[0]];
    let weights: Vec<f64> = top
        .iter()
        .map(|&i| ((logits[i] - max) / cfg.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let u = rng.uniform() * total;
    let mut acc = 0.0;
    for (w, &i) in weights.iter().zip(top) {
        acc += w;
        if u < acc {
            debug_assert!(top.contains(&i));
            return i;
        }
    }
    *top.last().unwrap()
}

/// Autoregressive Top-K sampling of a full column-major index sequence.
pub fn sample_sequence(
    store: &ParamStore,
    cfg: &PriorCfg,
    feat_value: &Array,
    sampler: &SamplerConfig,
) -> Vec<usize> {
    let mut rng = Rng::new(sampler.seed).fork(0x5a3);
    let mut tokens: Vec<usize> = Vec::with_capacity(cfg.seq_len);
    for _ in 0..cfg.seq_len {
        let mut tape = Tape::new();
        let feat = tape.constant(feat_value.clone());
        let mut ctx = NetCtx::frozen(&mut tape, store);
        let logits = prior_logits(&mut ctx, cfg, feat, &tokens);
        let v = tape.value(logits);
        let last = &v.data[(tokens.len()) * cfg.l..(tokens.len() + 1) * cfg.l];
        tokens.push(sample_from_logits(last, sampler, &mut rng));
    }
    tokens
}

/// One (index sequence, caption tokens) training pair.
pub struct PriorExample {
    pub sequence: Vec<usize>,
    pub token_ids: Vec<usize>,
}

/// Second-stage training. With `joint_text` the text encoder parameters
/// receive gradients; otherwise they stay frozen (contrastive-pretrained).
#[allow(clippy::too_many_arguments)]
pub fn train_prior(
    store: &mut ParamStore,
    cfg: &PriorCfg,
    enc: &TextEncoderCfg,
    mode: TextMode,
    joint_text: bool,
    examples: &[PriorExample],
    steps: usize,
    lr: f64,
    seed: u64,
    mut log: impl FnMut(usize, f64),
) -> Result<()> {
    if examples.is_empty() {
        return Err(SvqaError::InvalidArgument("no prior training examples".into()));
    }
    let mut rng = Rng::new(seed).fork(0x9107);
    for step in 0..steps {
        let adam = AdamConfig {
            lr: crate::optim::cosine_lr(lr, step, steps),
            ..Default::default()
        };
        let ex = &examples[rng.below(examples.len())];
        let mut tape = Tape::new();
        let mut bound = BoundParams::default();
        let feat = if joint_text {
            let mut tctx = NetCtx::trainable(&mut tape, store, &mut bound);
            text::encode_text(&mut tctx, enc, &ex.token_ids, mode)
        } else {
            let mut tctx = NetCtx::frozen(&mut tape, store);
            text::encode_text(&mut tctx, enc, &ex.token_ids, mode)
        };
        let nll = {
            let mut ctx = NetCtx::trainable(&mut tape, store, &mut bound);
            sequence_nll(&mut ctx, cfg, feat, &ex.sequence)?
        };
        let v = tape.value(nll).item();
        tape.validate_finite()?;
        let mut grads = tape.backward(nll);
        store.apply_gradients(&bound, &mut grads, &adam);
        log(step, v);
    }
    Ok(())
}

/// Frozen held-out NLL of one example.
pub fn eval_nll(
    store: &ParamStore,
    cfg: &PriorCfg,
    enc: &TextEncoderCfg,
    mode: TextMode,
    ex: &PriorExample,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut ctx = NetCtx::frozen(&mut tape, store);
    let feat = text::encode_text(&mut ctx, enc, &ex.token_ids, mode);
    let nll = sequence_nll(&mut ctx, cfg, feat, &ex.sequence)?;
    Ok(tape.value(nll).item())
}

pub struct GenerateOutput {
    pub mel: MelSpectrogram,
    pub waveform: Waveform,
    pub sequence: Vec<usize>,
    /// Griffin-Lim spectral-convergence trace.
    pub vocoder_errors: Vec<f64>,
}

pub const GRIFFIN_LIM_ITERS: usize = 32;

/// Sampling pipeline up to the spectrogram: text -> prefix features ->
/// index sequence -> latents -> decoder. Deterministic for a fixed
/// (text, seed, top_k).
pub fn generate_mel(
    store: &ParamStore,
    cfg: &Config,
    text_input: &str,
    sampler: &SamplerConfig,
) -> Result<(MelSpectrogram, Vec<usize>)> {
    let vocab = text::Vocabulary::new();
    let tokens = vocab.encode(text_input);
    if tokens.is_empty() && cfg.text_mode != TextMode::NoFeat {
        return Err(SvqaError::InvalidArgument(
            "empty text: nothing to condition on (use no_feat mode)".into(),
        ));
    }
    for name in ["prior.tok_emb", "codebook", "dec.convt0.w", "txt.tok_emb"] {
        if !store.contains(name) {
            return Err(SvqaError::MissingCheckpoint(name.to_string()));
        }
    }
    let enc = TextEncoderCfg::from_config(cfg, &vocab);
    let pcfg = PriorCfg::from_config(cfg);
    let feat_value = {
        let mut tape = Tape::new();
        let mut ctx = NetCtx::frozen(&mut tape, store);
        let feat = text::encode_text(&mut ctx, &enc, &tokens, cfg.text_mode);
        tape.value(feat).clone()
    };
    let sequence = sample_sequence(store, &pcfg, &feat_value, sampler);
    let grid = unflatten(&sequence, cfg.latent_rows(), cfg.latent_cols())?;
    let latents = lookup(&grid, &store.get("codebook").value)?;

    let mut tape = Tape::new();
    // [m, t, n_z] -> [1, n_z, m, t] for the decoder.
    let z = tape.constant(latents);
    let z = tape.transpose(z, &[2, 0, 1]);
    let z = tape.reshape(z, vec![1, cfg.latent_dim, cfg.latent_rows(), cfg.latent_cols()]);
    let mut ctx = NetCtx::frozen(&mut tape, store);
    let recon = specvqgan::decode(&mut ctx, z);
    let mel = MelSpectrogram {
        values: tape.value(recon).reshaped(vec![cfg.mel_bands, cfg.frames()]),
    };
    Ok((mel, sequence))
}

/// Full pipeline including the Griffin-Lim vocoder.
pub fn generate(
    store: &ParamStore,
    cfg: &Config,
    text_input: &str,
    sampler: &SamplerConfig,
) -> Result<GenerateOutput> {
    let (mel, sequence) = generate_mel(store, cfg, text_input, sampler)?;
    let fb = MelFilterbank::new(cfg.mel_bands, cfg.n_fft, cfg.sample_rate)?;
    let GriffinLimResult { waveform, errors } =
        dsp::griffin_lim(&mel, &fb, cfg.hop, GRIFFIN_LIM_ITERS, cfg.clip_samples())?;
    Ok(GenerateOutput {
        mel,
        waveform,
        sequence,
        vocoder_errors: errors,
    })
}
