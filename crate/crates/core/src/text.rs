//! Text conditioning features in three regimes: a single learned constant
//! (no_feat), the CLS vector of a small self-attention encoder (pooled), or
//! the full per-token contextual sequence (full). The encoder can be trained
//! jointly with the prior or pretrained contrastively against audio
//! embeddings and frozen.

use crate::array::Array;
use crate::config::{Config, TextMode};
use crate::error::{Result, SvqaError};
use crate::nn::{self, NetCtx};
use crate::optim::{AdamConfig, BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;

const WORDS: &[&str] = &[
    "a", "low", "high", "tone", "plays", "steady", "hums", "pure", "sounds", "chirp", "sweeps",
    "upward", "rising", "quick", "slides", "white", "noise", "hisses", "harsh", "rushes", "burst",
    "square", "beep", "buzzes", "sharp", "repeats", "warble", "wavers", "slow", "trembles",
    "pulses", "clicks", "tick", "patter", "tap", "rapid", "then", "while", "the", "soft", "loud",
    "long", "short", "fades", "hum", "and", "is", "heard", "plain", "clear", "bright", "deep",
    "thin", "calm", "dry", "fast", "faint", "even", "tight", "cool", "flat",
];

/// Fixed wordlist tokenizer. Ids are stable across runs: PAD=0, UNK=1,
/// CLS=2, then the wordlist in order.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Vocabulary {
        let mut words = vec!["<pad>".to_string(), "<unk>".to_string(), "<cls>".to_string()];
        words.extend(WORDS.iter().map(|s| s.to_string()));
        Vocabulary { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, word: &str) -> usize {
        self.words
            .iter()
            .position(|w| w == word)
            .unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id_of(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD)
            .map(|&i| self.words.get(i).map(|s| s.as_str()).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Space-joined wordlist, for embedding in checkpoints.
    pub fn serialize(&self) -> String {
        self.words.join(" ")
    }

    pub fn deserialize(s: &str) -> Vocabulary {
        Vocabulary {
            words: s.split(' ').map(|w| w.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TextEncoderCfg {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
}

impl TextEncoderCfg {
    pub fn from_config(cfg: &Config, vocab: &Vocabulary) -> TextEncoderCfg {
        TextEncoderCfg {
            vocab_size: vocab.len(),
            dim: cfg.prior_width,
            layers: 2,
            heads: 4,
            max_len: cfg.max_text_len,
        }
    }
}

/// Insert all "txt.*" parameters.
pub fn init_text_encoder(store: &mut ParamStore, cfg: &TextEncoderCfg, rng: &mut Rng) {
    store.init_uniform("txt.tok_emb", &[cfg.vocab_size, cfg.dim], cfg.dim, rng);
    store.init_uniform("txt.pos_emb", &[cfg.max_len + 1, cfg.dim], cfg.dim, rng);
    for l in 0..cfg.layers {
        nn::init_transformer_block(store, &format!("txt.blk{l}"), cfg.dim, rng);
    }
    nn::init_layer_norm(store, "txt.ln_f", cfg.dim);
    store.init_uniform("txt.no_feat", &[1, cfg.dim], cfg.dim, rng);
}

/// Truncate to max_len, mapping unknown ids to UNK. Returns the kept ids and
/// whether truncation happened.
pub fn clamp_tokens(ids: &[usize], vocab_size: usize, max_len: usize) -> (Vec<usize>, bool) {
    let truncated = ids.len() > max_len;
    let kept = ids
        .iter()
        .take(max_len)
        .map(|&i| if i < vocab_size { i } else { UNK })
        .collect();
    (kept, truncated)
}

/// Run the encoder over [CLS] + tokens (padded) and return the feature
/// matrix for the requested mode: [1,d] constant for no_feat, [1,d] CLS for
/// pooled, [max_len, d] token features for full. PAD keys are masked out of
/// attention, so pad content never leaks into real positions.
pub fn encode_text(
    ctx: &mut NetCtx,
    enc: &TextEncoderCfg,
    token_ids: &[usize],
    mode: TextMode,
) -> NodeId {
    if mode == TextMode::NoFeat {
        return ctx.param("txt.no_feat");
    }
    let (tokens, _) = clamp_tokens(token_ids, enc.vocab_size, enc.max_len);
    let s = enc.max_len + 1;
    let mut ids = Vec::with_capacity(s);
    ids.push(CLS);
    ids.extend(&tokens);
    ids.resize(s, PAD);
    let real = |p: usize| p == 0 || (p >= 1 && p - 1 < tokens.len());

    let tok_w = ctx.param("txt.tok_emb");
    let tok = ctx.tape.embedding(tok_w, &ids);
    let pos_w = ctx.param("txt.pos_emb");
    let pos = ctx.tape.embedding(pos_w, &(0..s).collect::<Vec<_>>());
    let mut x = ctx.tape.add(tok, pos);
    let mask = ctx
        .tape
        .constant(nn::mask_array(enc.heads, |_, k| real(k), s));
    for l in 0..enc.layers {
        x = nn::transformer_block(ctx, &format!("txt.blk{l}"), x, enc.heads, mask);
    }
    let x = nn::layer_norm(ctx, "txt.ln_f", x);
    match mode {
        TextMode::Pooled => ctx.tape.slice_rows(x, 0, 1),
        TextMode::Full => ctx.tape.slice_rows(x, 1, s),
        TextMode::NoFeat => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// Contrastive audio-text pretraining

pub const PROJ_DIM: usize = 64;
const AUD_CHANNELS: [usize; 3] = [8, 16, 32];

/// Insert the audio-embedding tower ("aud_proj.*") and the text projection.
pub fn init_contrastive(store: &mut ParamStore, enc: &TextEncoderCfg, rng: &mut Rng) {
    let mut c_in = 1;
    for (i, &c_out) in AUD_CHANNELS.iter().enumerate() {
        nn::init_conv(store, &format!("aud_proj.conv{i}"), c_out, c_in, 4, rng);
        c_in = c_out;
    }
    nn::init_linear(store, "aud_proj.proj", AUD_CHANNELS[2], PROJ_DIM, rng);
    nn::init_linear(store, "txt.proj", enc.dim, PROJ_DIM, rng);
    // exp(log_temp) scales cosine logits; init to 1/0.07 as is conventional.
    store.insert("aud_proj.log_temp", Array::scalar((1.0f64 / 0.07).ln()));
}

/// Embed a batch of mel spectrograms [B,1,M,T] to unit rows [B, PROJ_DIM].
pub fn embed_audio(ctx: &mut NetCtx, mels: NodeId) -> NodeId {
    let mut x = mels;
    for i in 0..AUD_CHANNELS.len() {
        x = nn::conv(ctx, &format!("aud_proj.conv{i}"), x, 2, 1);
        x = ctx.tape.relu(x);
    }
    let pooled = ctx.tape.mean_pool2d(x);
    let proj = nn::linear(ctx, "aud_proj.proj", pooled);
    ctx.tape.l2_normalize_rows(proj)
}

/// Embed captions to unit rows [B, PROJ_DIM] via the CLS feature.
pub fn embed_texts(ctx: &mut NetCtx, enc: &TextEncoderCfg, captions: &[Vec<usize>]) -> NodeId {
    let feats: Vec<NodeId> = captions
        .iter()
        .map(|ids| encode_text(ctx, enc, ids, TextMode::Pooled))
        .collect();
    let stacked = ctx.tape.concat(&feats, 0);
    let proj = nn::linear(ctx, "txt.proj", stacked);
    ctx.tape.l2_normalize_rows(proj)
}

/// Symmetric InfoNCE over a B x B cosine-similarity matrix with a learnable
/// temperature. Matched pairs sit on the diagonal.
pub fn contrastive_loss(
    ctx: &mut NetCtx,
    enc: &TextEncoderCfg,
    mels: NodeId,
    captions: &[Vec<usize>],
) -> Result<(NodeId, NodeId)> {
    let b = captions.len();
    if b < 2 {
        return Err(SvqaError::InvalidArgument(
            "contrastive batch needs >= 2 pairs (no negatives otherwise)".into(),
        ));
    }
    let a_emb = embed_audio(ctx, mels);
    let t_emb = embed_texts(ctx, enc, captions);
    let t_t = ctx.tape.transpose(t_emb, &[1, 0]);
    let sims = ctx.tape.matmul(a_emb, t_t);
    let log_temp = ctx.param("aud_proj.log_temp");
    let temp = ctx.tape.exp(log_temp);
    let logits = ctx.tape.mul_scalar_node(sims, temp);
    let diag: Vec<usize> = (0..b).collect();
    let loss_a = ctx.tape.cross_entropy_logits(logits, &diag);
    let logits_t = ctx.tape.transpose(logits, &[1, 0]);
    let loss_t = ctx.tape.cross_entropy_logits(logits_t, &diag);
    let sum = ctx.tape.add(loss_a, loss_t);
    let loss = ctx.tape.scale(sum, 0.5);
    Ok((loss, logits))
}

/// One (mel, caption) pair ready for training.
pub struct PairedExample {
    /// [mel_bands, frames]
    pub mel: Array,
    pub token_ids: Vec<usize>,
}

fn stack_mels(tape: &mut Tape, items: &[&PairedExample]) -> NodeId {
    let (m, t) = (items[0].mel.dim(0), items[0].mel.dim(1));
    let mut data = Vec::with_capacity(items.len() * m * t);
    for it in items {
        data.extend_from_slice(&it.mel.data);
    }
    tape.constant(Array::new(vec![items.len(), 1, m, t], data))
}

/// CL'A'P-style pretraining: matched audio-text pairs are positives, every
/// in-batch mismatch is a negative.
pub fn contrastive_pretrain(
    store: &mut ParamStore,
    enc: &TextEncoderCfg,
    train: &[PairedExample],
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    mut log: impl FnMut(usize, f64),
) -> Result<()> {
    if batch < 2 {
        return Err(SvqaError::InvalidArgument("batch must be >= 2".into()));
    }
    let mut rng = Rng::new(seed).fork(0xc17a);
    for step in 0..steps {
        let adam = AdamConfig {
            lr: crate::optim::cosine_lr(lr, step, steps),
            ..Default::default()
        };
        let items: Vec<&PairedExample> = (0..batch)
            .map(|_| &train[rng.below(train.len())])
            .collect();
        let captions: Vec<Vec<usize>> = items.iter().map(|i| i.token_ids.clone()).collect();
        let mut tape = Tape::new();
        let mut bound = BoundParams::default();
        let mels = stack_mels(&mut tape, &items);
        let mut ctx = NetCtx::trainable(&mut tape, store, &mut bound);
        let (loss, _) = contrastive_loss(&mut ctx, enc, mels, &captions)?;
        let loss_v = tape.value(loss).item();
        tape.validate_finite()?;
        let mut grads = tape.backward(loss);
        store.apply_gradients(&bound, &mut grads, &adam);
        log(step, loss_v);
    }
    Ok(())
}

/// Mean top-1 audio->text retrieval accuracy over seeded random batches.
pub fn retrieval_eval(
    store: &ParamStore,
    enc: &TextEncoderCfg,
    held_out: &[PairedExample],
    batch: usize,
    n_batches: usize,
    seed: u64,
) -> f64 {
    let mut rng = Rng::new(seed).fork(0x3e7a);
    let mut correct = 0usize;
    let mut total = 0usize;
    for _ in 0..n_batches {
        let items: Vec<&PairedExample> = (0..batch)
            .map(|_| &held_out[rng.below(held_out.len())])
            .collect();
        let captions: Vec<Vec<usize>> = items.iter().map(|i| i.token_ids.clone()).collect();
        let mut tape = Tape::new();
        let mels = stack_mels(&mut tape, &items);
        let mut ctx = NetCtx::frozen(&mut tape, store);
        let a = embed_audio(&mut ctx, mels);
        let t = embed_texts(&mut ctx, enc, &captions);
        let tt = ctx.tape.transpose(t, &[1, 0]);
        let sims = ctx.tape.matmul(a, tt);
        let v = tape.value(sims);
        for r in 0..batch {
            let row = &v.data[r * batch..(r + 1) * batch];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if argmax == r {
                correct += 1;
            }
            total += 1;
        }
    }
    correct as f64 / total as f64
}
