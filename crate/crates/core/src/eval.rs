//! Objective evaluation: a multi-label sound-event classifier trained with
//! binary cross-entropy backs all content metrics — its per-scale feature
//! maps feed the perceptual loss, its penultimate embedding feeds FID, and
//! its sigmoid posteriors feed the summed-Bernoulli-KL divergence (the MMKL
//! stand-in) and tag-relevance scoring.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::array::Array;
use crate::dataset::NUM_CLASSES;
use crate::error::{Result, SvqaError};
use crate::nn::{self, NetCtx};
use crate::optim::{AdamConfig, BoundParams, ParamStore};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};

const CLF_CHANNELS: [usize; 3] = [8, 16, 32];
const K: usize = 4;

pub fn init_classifier(store: &mut ParamStore, rng: &mut Rng) {
    let mut c_in = 1;
    for (i, &c_out) in CLF_CHANNELS.iter().enumerate() {
        nn::init_conv(store, &format!("clf.conv{i}"), c_out, c_in, K, rng);
        c_in = c_out;
    }
    nn::init_linear(store, "clf.head", CLF_CHANNELS[2], NUM_CLASSES, rng);
}

/// The three post-activation feature maps, one per conv scale.
pub fn classifier_scales(ctx: &mut NetCtx, x: NodeId) -> Vec<NodeId> {
    let mut scales = Vec::with_capacity(3);
    let mut h = x;
    for i in 0..CLF_CHANNELS.len() {
        h = nn::conv(ctx, &format!("clf.conv{i}"), h, 2, 1);
        h = ctx.tape.relu(h);
        scales.push(h);
    }
    scales
}

/// Full forward pass: (per-scale features, penultimate embedding [B, C],
/// class logits [B, 6]).
pub fn classifier_forward(ctx: &mut NetCtx, x: NodeId) -> (Vec<NodeId>, NodeId, NodeId) {
    let scales = classifier_scales(ctx, x);
    let embed = ctx.tape.mean_pool2d(*scales.last().unwrap());
    let logits = nn::linear(ctx, "clf.head", embed);
    (scales, embed, logits)
}

/// Sigmoid class posteriors for one spectrogram [M, T].
pub fn class_posteriors(store: &ParamStore, mel: &Array) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = crate::specvqgan::stack_mels(&mut tape, &[mel]);
    let mut ctx = NetCtx::frozen(&mut tape, store);
    let (_, _, logits) = classifier_forward(&mut ctx, x);
    tape.value(logits).data.iter().map(|&l| sigmoid(l)).collect()
}

/// Penultimate embedding for one spectrogram (FID features).
pub fn feature_embedding(store: &ParamStore, mel: &Array) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = crate::specvqgan::stack_mels(&mut tape, &[mel]);
    let mut ctx = NetCtx::frozen(&mut tape, store);
    let (_, embed, _) = classifier_forward(&mut ctx, x);
    tape.value(embed).data.clone()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One labeled training clip.
pub struct LabeledClip {
    /// [mel_bands, frames]
    pub mel: Array,
    /// Multi-hot class targets, length 6.
    pub targets: Vec<f64>,
}

/// BCE training of the multi-label event classifier.
pub fn train_classifier(
    store: &mut ParamStore,
    clips: &[LabeledClip],
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    mut log: impl FnMut(usize, f64),
) -> Result<()> {
    let mut present = [false; NUM_CLASSES];
    for c in clips {
        for (k, &t) in c.targets.iter().enumerate() {
            if t > 0.5 {
                present[k] = true;
            }
        }
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(SvqaError::InvalidArgument(
            "classifier needs a corpus with at least two distinct classes".into(),
        ));
    }
    let mut rng = Rng::new(seed).fork(0xc1f);
    for step in 0..steps {
        let adam = AdamConfig {
            lr: crate::optim::cosine_lr(lr, step, steps),
            ..Default::default()
        };
        let picks: Vec<&LabeledClip> = (0..batch).map(|_| &clips[rng.below(clips.len())]).collect();
        let mut tape = Tape::new();
        let mut bound = BoundParams::default();
        let mels: Vec<&Array> = picks.iter().map(|c| &c.mel).collect();
        let x = crate::specvqgan::stack_mels(&mut tape, &mels);
        let logits = {
            let mut ctx = NetCtx::trainable(&mut tape, store, &mut bound);
            classifier_forward(&mut ctx, x).2
        };
        let targets: Vec<f64> = picks.iter().flat_map(|c| c.targets.clone()).collect();
        let t = Array::new(vec![batch, NUM_CLASSES], targets);
        let loss = tape.bce_logits(logits, &t);
        let v = tape.value(loss).item();
        tape.validate_finite()?;
        let mut grads = tape.backward(loss);
        store.apply_gradients(&bound, &mut grads, &adam);
        log(step, v);
    }
    Ok(())
}

/// Mean average precision over classes. `scores[i][k]` is the posterior for
/// clip i, class k; `targets` is multi-hot. Classes with no positives are
/// skipped.
pub fn mean_average_precision(scores: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let mut aps = Vec::new();
    for k in 0..NUM_CLASSES {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b][k].partial_cmp(&scores[a][k]).unwrap().then(a.cmp(&b)));
        let total_pos = targets.iter().filter(|t| t[k] > 0.5).count();
        if total_pos == 0 {
            continue;
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            if targets[i][k] > 0.5 {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        aps.push(ap / total_pos as f64);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Metrics

pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB for spectrograms in [-1, 1] (range 2).
pub fn psnr(x: &Array, y: &Array) -> Result<f64> {
    if x.shape != y.shape {
        return Err(SvqaError::ShapeMismatch {
            op: "psnr".into(),
            detail: format!("{:?} vs {:?}", x.shape, y.shape),
        });
    }
    let mse: f64 =
        x.data.iter().zip(&y.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (4.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn covariance(rows: &[Vec<f64>], mu: &[f64]) -> DMatrix<f64> {
    let (n, d) = (rows.len(), mu.len());
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        for i in 0..d {
            let di = r[i] - mu[i];
            for j in 0..d {
                cov[(i, j)] += di * (r[j] - mu[j]);
            }
        }
    }
    cov / (n as f64 - 1.0)
}

fn matrix_sqrt_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sq = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * sq * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature-row sets:
/// ||mu_r - mu_g||^2 + tr(S_r + S_g - 2 (S_r^1/2 S_g S_r^1/2)^1/2).
/// Covariances are regularized by +1e-6 I.
pub fn fid(real: &[Vec<f64>], gen: &[Vec<f64>]) -> Result<f64> {
    if real.len() < 2 || gen.len() < 2 {
        return Err(SvqaError::InvalidArgument(
            "fid needs at least 2 samples per set".into(),
        ));
    }
    let d = real[0].len();
    if gen[0].len() != d {
        return Err(SvqaError::InvalidArgument("fid feature widths differ".into()));
    }
    let mean = |rows: &[Vec<f64>]| -> Vec<f64> {
        let mut mu = vec![0.0; d];
        for r in rows {
            for (m, v) in mu.iter_mut().zip(r) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= rows.len() as f64);
        mu
    };
    let mu_r = mean(real);
    let mu_g = mean(gen);
    let reg = DMatrix::identity(d, d) * 1e-6;
    let cov_r = covariance(real, &mu_r) + &reg;
    let cov_g = covariance(gen, &mu_g) + &reg;
    let sr = matrix_sqrt_sym(&cov_r);
    let inner = &sr * &cov_g * &sr;
    let cross = matrix_sqrt_sym(&inner);
    let mean_term: f64 = mu_r.iter().zip(&mu_g).map(|(a, b)| (a - b) * (a - b)).sum();
    let trace_term = cov_r.trace() + cov_g.trace() - 2.0 * cross.trace();
    Ok((mean_term + trace_term).max(0.0))
}

const PROB_FLOOR: f64 = 1e-6;

/// Summed per-class Bernoulli KL between two multi-label posteriors, in
/// nats. Real posteriors are p, generated are q.
pub fn mmkl(p_real: &[f64], q_gen: &[f64]) -> f64 {
    assert_eq!(p_real.len(), q_gen.len());
    let clamp = |v: f64| v.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    p_real
        .iter()
        .zip(q_gen)
        .map(|(&pr, &qr)| {
            let (p, q) = (clamp(pr), clamp(qr));
            p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
        })
        .sum()
}

/// Precision/recall/F1 of thresholded posteriors against true class tags.
/// An empty prediction against nonempty tags scores precision 0.
pub fn tag_relevance(probs: &[f64], tags: &[bool], threshold: f64) -> (f64, f64, f64) {
    let predicted: Vec<bool> = probs.iter().map(|&p| p > threshold).collect();
    let tp = predicted.iter().zip(tags).filter(|(&p, &t)| p && t).count() as f64;
    let n_pred = predicted.iter().filter(|&&p| p).count() as f64;
    let n_true = tags.iter().filter(|&&t| t).count() as f64;
    let precision = if n_pred == 0.0 { 0.0 } else { tp / n_pred };
    let recall = if n_true == 0.0 { 0.0 } else { tp / n_true };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// One result row of the evaluation report.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub condition: String,
    pub psnr_db: f64,
    pub fid: f64,
    pub mmkl_nats: f64,
    pub tag_precision: f64,
    pub tag_recall: f64,
    pub tag_f1: f64,
    pub clips: usize,
}

/// One test clip ready for evaluation.
pub struct EvalClip {
    pub mel: Array,
    pub caption: String,
    pub tags: Vec<bool>,
}

/// Evaluate one trained condition on paired (real, generated) clips. The
/// caller supplies the generator so the same harness scores ground truth
/// against itself (`|_, real| Ok(real.clone())`).
pub fn evaluate_condition(
    clf: &ParamStore,
    condition: &str,
    clips: &[EvalClip],
    mut generate: impl FnMut(usize, &EvalClip) -> Result<Array>,
    threshold: f64,
) -> Result<MetricReport> {
    if clips.len() < 2 {
        return Err(SvqaError::InvalidArgument(
            "evaluation needs at least 2 clips".into(),
        ));
    }
    let mut psnr_acc = 0.0;
    let mut mmkl_acc = 0.0;
    let mut prf = (0.0, 0.0, 0.0);
    let mut real_feats = Vec::with_capacity(clips.len());
    let mut gen_feats = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let gen_mel = generate(i, clip)?;
        psnr_acc += psnr(&clip.mel, &gen_mel)?;
        let p = class_posteriors(clf, &clip.mel);
        let q = class_posteriors(clf, &gen_mel);
        mmkl_acc += mmkl(&p, &q);
        let (pr, rc, f1) = tag_relevance(&q, &clip.tags, threshold);
        prf.0 += pr;
        prf.1 += rc;
        prf.2 += f1;
        real_feats.push(feature_embedding(clf, &clip.mel));
        gen_feats.push(feature_embedding(clf, &gen_mel));
    }
    let n = clips.len() as f64;
    Ok(MetricReport {
        condition: condition.to_string(),
        psnr_db: psnr_acc / n,
        fid: fid(&real_feats, &gen_feats)?,
        mmkl_nats: mmkl_acc / n,
        tag_precision: prf.0 / n,
        tag_recall: prf.1 / n,
        tag_f1: prf.2 / n,
        clips: clips.len(),
    })
}
