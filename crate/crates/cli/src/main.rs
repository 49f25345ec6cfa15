//! Command-line entry point: dataset synthesis, the four training stages,
//! text-conditioned generation, and evaluation. All logs go to stderr;
//! machine artifacts (checkpoints, WAVs, reports, manifests) go to files.
//! Exit codes: 0 ok, 1 runtime failure, 2 usage or config error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use svqa_core::checkpoint;
use svqa_core::config::TextMode;
use svqa_core::dataset::{self, Corpus, ManifestRow, Split};
use svqa_core::dsp;
use svqa_core::eval;
use svqa_core::optim::ParamStore;
use svqa_core::prior::{self, IndexGrid, PriorCfg, SamplerConfig};
use svqa_core::specvqgan;
use svqa_core::text::{self, TextEncoderCfg, Vocabulary};
use svqa_core::{Array, Config, Result, Rng, SvqaError};

#[derive(Parser)]
#[command(name = "svqa", version, about = "Trainable text-to-audio pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a labeled sound-event corpus with templated captions.
    Dataset {
        /// Output directory for wav/ and manifest.tsv
        #[arg(long)]
        out: PathBuf,
        /// Number of clips
        #[arg(long)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Config file (defaults when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one stage and write its checkpoint.
    Train {
        #[arg(value_enum)]
        stage: Stage,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory (containing manifest.tsv)
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a clip from text and write a WAV (and optional mel dump).
    Generate {
        #[arg(long)]
        text: String,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional spectrogram dump (checkpoint container, one array "mel")
        #[arg(long)]
        mel_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Top-K override (default from config)
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score trained conditions on the test split and write a JSON report.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum Stage {
    Codebook,
    Classifier,
    Text,
    Prior,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Codebook => "codebook",
            Stage::Classifier => "classifier",
            Stage::Text => "text",
            Stage::Prior => "prior",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                SvqaError::Config { .. } | SvqaError::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Dataset {
            out,
            num,
            seed,
            config,
        } => {
            if num == 0 {
                return Err(SvqaError::InvalidArgument("--num must be at least 1".into()));
            }
            let cfg = load_config(&config)?;
            let corpus = dataset::generate_corpus(&cfg, num, seed, &out)?;
            eprintln!("wrote {} clips to {}", corpus.rows.len(), out.display());
            Ok(())
        }
        Cmd::Train {
            stage,
            config,
            data,
            out,
        } => cmd_train(stage, &load_config(&config)?, &data, &out),
        Cmd::Generate {
            text,
            ckpt_dir,
            out,
            mel_out,
            seed,
            topk,
            config,
        } => cmd_generate(&load_config(&config)?, &text, &ckpt_dir, &out, mel_out.as_deref(), seed, topk),
        Cmd::Evaluate {
            config,
            data,
            ckpt_dir,
            report,
            threshold,
            seed,
        } => cmd_evaluate(&load_config(&config)?, &data, &ckpt_dir, &report, threshold, seed),
    }
}

// ---------------------------------------------------------------------------
// Shared data loading

fn load_corpus(data: &Path) -> Result<Corpus> {
    Corpus::load(&data.join("manifest.tsv"))
}

/// Load every clip of a split as a normalized mel spectrogram.
fn split_mels<'a>(cfg: &Config, corpus: &'a Corpus, split: Split) -> Result<Vec<(&'a ManifestRow, Array)>> {
    let fb = dsp::MelFilterbank::new(cfg.mel_bands, cfg.n_fft, cfg.sample_rate)?;
    let mut out = Vec::new();
    for row in corpus.rows_in(split) {
        let wav = dsp::wav_read(&corpus.wav_path(row))?;
        let mel = dsp::mel_of_config(cfg, &wav, &fb)?;
        out.push((row, mel.values));
    }
    Ok(out)
}

fn multi_hot(row: &ManifestRow) -> Vec<f64> {
    let mut t = vec![0.0; dataset::NUM_CLASSES];
    for c in &row.class_tags {
        t[*c as usize] = 1.0;
    }
    t
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if !path.exists() {
        return Err(SvqaError::MissingCheckpoint(format!(
            "{} checkpoint required: {} (run `svqa train {stage}` first)",
            stage,
            path.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Run manifest

#[derive(Serialize)]
struct RunManifest {
    stage: String,
    version: String,
    config_hash: String,
    checkpoint: String,
    steps: usize,
    wall_seconds: f64,
}

fn config_hash(cfg: &Config) -> String {
    // FNV-1a over the canonical serialization
    let mut h: u64 = 0xcbf29ce484222325;
    for b in cfg.serialize().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    let path = dir.join(format!("run_manifest_{}.json", m.stage));
    let tmp = path.with_extension("json.tmp");
    let body = serde_json::to_string_pretty(m)
        .map_err(|e| SvqaError::InvalidArgument(format!("manifest serialization: {e}")))?;
    std::fs::write(&tmp, body)?;
    std::fs::rename(&tmp, &path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Training stages

fn cmd_train(stage: Stage, cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let corpus = load_corpus(data)?;
    let started = Instant::now();
    let (ckpt, steps) = match stage {
        Stage::Classifier => train_classifier(cfg, &corpus, out)?,
        Stage::Codebook => train_codebook(cfg, &corpus, out)?,
        Stage::Text => train_text(cfg, &corpus, out)?,
        Stage::Prior => train_prior(cfg, &corpus, out)?,
    };
    write_manifest(
        out,
        &RunManifest {
            stage: stage.name().to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(cfg),
            checkpoint: ckpt.display().to_string(),
            steps,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    )
}

fn step_meta(steps: usize) -> BTreeMap<String, Array> {
    let mut m = BTreeMap::new();
    m.insert("@step".to_string(), Array::scalar(steps as f64));
    m
}

fn resume(path: &Path) -> Result<Option<(ParamStore, usize)>> {
    if !path.exists() {
        return Ok(None);
    }
    let (store, meta) = checkpoint::load_store(path)?;
    let step = meta.get("@step").map(|a| a.item() as usize).unwrap_or(0);
    eprintln!("resuming from {} at step {step}", path.display());
    Ok(Some((store, step)))
}

fn train_classifier(cfg: &Config, corpus: &Corpus, out: &Path) -> Result<(PathBuf, usize)> {
    let train = split_mels(cfg, corpus, Split::Train)?;
    let clips: Vec<eval::LabeledClip> = train
        .iter()
        .map(|(row, mel)| eval::LabeledClip {
            mel: mel.clone(),
            targets: multi_hot(row),
        })
        .collect();
    let path = out.join("classifier.svqa");
    let (mut store, start) = match resume(&path)? {
        Some(v) => v,
        None => {
            let mut s = ParamStore::new();
            eval::init_classifier(&mut s, &mut Rng::new(cfg.seed));
            (s, 0)
        }
    };
    eval::train_classifier(
        &mut store,
        &clips,
        cfg.classifier_steps,
        cfg.batch,
        cfg.lr,
        cfg.seed,
        |step, loss| {
            if step % 50 == 0 {
                eprintln!("classifier step {}\tbce {loss:.4}", start + step);
            }
        },
    )?;
    // held-out quality check
    let val = split_mels(cfg, corpus, Split::Val)?;
    if !val.is_empty() {
        let scores: Vec<Vec<f64>> = val
            .iter()
            .map(|(_, mel)| eval::class_posteriors(&store, mel))
            .collect();
        let targets: Vec<Vec<f64>> = val.iter().map(|(row, _)| multi_hot(row)).collect();
        eprintln!("classifier val mAP {:.3}", eval::mean_average_precision(&scores, &targets));
    }
    checkpoint::save_store(&path, &store, &step_meta(start + cfg.classifier_steps))?;
    Ok((path, cfg.classifier_steps))
}

fn train_codebook(cfg: &Config, corpus: &Corpus, out: &Path) -> Result<(PathBuf, usize)> {
    let clf_path = out.join("classifier.svqa");
    require(&clf_path, "classifier")?;
    let (clf, _) = checkpoint::load_store(&clf_path)?;
    let train = split_mels(cfg, corpus, Split::Train)?;
    let mels: Vec<Array> = train.into_iter().map(|(_, m)| m).collect();
    let path = out.join("codebook.svqa");
    let (mut store, start) = match resume(&path)? {
        Some(v) => v,
        None => {
            let mut s = ParamStore::new();
            let mut rng = Rng::new(cfg.seed);
            specvqgan::init_vq_model(&mut s, cfg, &mut rng);
            specvqgan::init_discriminator(&mut s, cfg, &mut rng);
            (s, 0)
        }
    };
    specvqgan::train_codebook(&mut store, cfg, &mels, Some(&clf), cfg.codebook_steps, start, |step, bd| {
        eprintln!(
            "{step}\t{:.5}\t{:.5}\t{:.5}\t{:.5}\t{:.5}",
            bd.total, bd.reconstruction, bd.commitment_term, bd.adversarial_g, bd.perceptual
        );
    })?;
    checkpoint::save_store(&path, &store, &step_meta(start + cfg.codebook_steps))?;
    Ok((path, cfg.codebook_steps))
}

fn train_text(cfg: &Config, corpus: &Corpus, out: &Path) -> Result<(PathBuf, usize)> {
    let vocab = Vocabulary::new();
    let enc = TextEncoderCfg::from_config(cfg, &vocab);
    let train = split_mels(cfg, corpus, Split::Train)?;
    let pairs: Vec<text::PairedExample> = train
        .iter()
        .map(|(row, mel)| text::PairedExample {
            mel: mel.clone(),
            token_ids: row.token_ids.clone(),
        })
        .collect();
    let path = out.join("text.svqa");
    let (mut store, start) = match resume(&path)? {
        Some(v) => v,
        None => {
            let mut s = ParamStore::new();
            let mut rng = Rng::new(cfg.seed);
            text::init_text_encoder(&mut s, &enc, &mut rng);
            text::init_contrastive(&mut s, &enc, &mut rng);
            (s, 0)
        }
    };
    text::contrastive_pretrain(
        &mut store,
        &enc,
        &pairs,
        cfg.text_steps,
        cfg.batch.max(2),
        cfg.lr,
        cfg.seed,
        |step, loss| {
            if step % 50 == 0 {
                eprintln!("text step {}\tinfonce {loss:.4}", start + step);
            }
        },
    )?;
    let held = split_mels(cfg, corpus, Split::Val)?;
    if held.len() >= 8 {
        let held_pairs: Vec<text::PairedExample> = held
            .iter()
            .map(|(row, mel)| text::PairedExample {
                mel: mel.clone(),
                token_ids: row.token_ids.clone(),
            })
            .collect();
        let acc = text::retrieval_eval(&store, &enc, &held_pairs, 8, 16, cfg.seed);
        eprintln!("text val retrieval@8 {acc:.3}");
    }
    let mut meta = step_meta(start + cfg.text_steps);
    meta.insert("@vocab".to_string(), checkpoint::string_to_array(&vocab.serialize()));
    checkpoint::save_store(&path, &store, &meta)?;
    Ok((path, cfg.text_steps))
}

fn train_prior(cfg: &Config, corpus: &Corpus, out: &Path) -> Result<(PathBuf, usize)> {
    let cb_path = out.join("codebook.svqa");
    require(&cb_path, "codebook")?;
    let (cb_store, _) = checkpoint::load_store(&cb_path)?;
    let vocab = Vocabulary::new();
    let enc = TextEncoderCfg::from_config(cfg, &vocab);
    let pcfg = PriorCfg::from_config(cfg);

    let train = split_mels(cfg, corpus, Split::Train)?;
    let (m, t) = (cfg.latent_rows(), cfg.latent_cols());
    let examples: Vec<prior::PriorExample> = train
        .iter()
        .map(|(row, mel)| {
            let indices = specvqgan::encode_indices(&cb_store, cfg, mel)?;
            let grid = IndexGrid { m, t, indices };
            Ok(prior::PriorExample {
                sequence: prior::flatten(&grid),
                token_ids: row.token_ids.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let path = out.join(format!("prior_{}.svqa", cfg.text_mode.as_str()));
    let joint = !cfg.contrastive;
    let (mut store, start) = match resume(&path)? {
        Some(v) => v,
        None => {
            let mut s = ParamStore::new();
            let mut rng = Rng::new(cfg.seed);
            init_prior_text(cfg, &enc, &mut s, &mut rng, out)?;
            prior::init_prior(&mut s, &pcfg, &mut rng);
            (s, 0)
        }
    };
    prior::train_prior(
        &mut store,
        &pcfg,
        &enc,
        cfg.text_mode,
        joint,
        &examples,
        cfg.prior_steps,
        cfg.lr,
        cfg.seed,
        |step, nll| {
            if step % 50 == 0 {
                eprintln!("prior step {}\tnll {nll:.4}", start + step);
            }
        },
    )?;
    let mut meta = step_meta(start + cfg.prior_steps);
    meta.insert("@vocab".to_string(), checkpoint::string_to_array(&vocab.serialize()));
    checkpoint::save_store(&path, &store, &meta)?;
    Ok((path, cfg.prior_steps))
}

/// Text-encoder parameters for the prior: either a fresh jointly trained
/// encoder, or the frozen contrastively pretrained one.
fn init_prior_text(
    cfg: &Config,
    enc: &TextEncoderCfg,
    store: &mut ParamStore,
    rng: &mut Rng,
    out: &Path,
) -> Result<()> {
    if cfg.contrastive {
        let txt_path = out.join("text.svqa");
        require(&txt_path, "text")?;
        let (txt_store, _) = checkpoint::load_store(&txt_path)?;
        store.absorb(txt_store.subset("txt."));
    } else {
        text::init_text_encoder(store, enc, rng);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Generation

fn cmd_generate(
    cfg: &Config,
    text_input: &str,
    ckpt_dir: &Path,
    out: &Path,
    mel_out: Option<&Path>,
    seed: u64,
    topk: Option<usize>,
) -> Result<()> {
    let cb_path = ckpt_dir.join("codebook.svqa");
    require(&cb_path, "codebook")?;
    let prior_path = ckpt_dir.join(format!("prior_{}.svqa", cfg.text_mode.as_str()));
    require(&prior_path, "prior")?;
    let (mut store, _) = checkpoint::load_store(&cb_path)?;
    let (prior_store, _) = checkpoint::load_store(&prior_path)?;
    store.absorb(prior_store);

    let sampler = SamplerConfig {
        top_k: topk.unwrap_or(cfg.top_k),
        temperature: cfg.temperature,
        seed,
    };
    let result = prior::generate(&store, cfg, text_input, &sampler)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    dsp::wav_write(out, &result.waveform)?;
    eprintln!("wrote {} ({} samples)", out.display(), result.waveform.samples.len());
    if let Some(mel_path) = mel_out {
        let mut arrays = BTreeMap::new();
        arrays.insert("mel".to_string(), result.mel.values.clone());
        checkpoint::write_arrays(mel_path, &arrays)?;
        eprintln!("wrote {}", mel_path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation

fn cmd_evaluate(
    cfg: &Config,
    data: &Path,
    ckpt_dir: &Path,
    report: &Path,
    threshold: f64,
    seed: u64,
) -> Result<()> {
    let corpus = load_corpus(data)?;
    let test = split_mels(cfg, &corpus, Split::Test)?;
    if test.is_empty() {
        return Err(SvqaError::InvalidArgument("test split is empty".into()));
    }
    let clf_path = ckpt_dir.join("classifier.svqa");
    require(&clf_path, "classifier")?;
    let (clf, _) = checkpoint::load_store(&clf_path)?;
    let cb_path = ckpt_dir.join("codebook.svqa");
    require(&cb_path, "codebook")?;
    let (cb_store, _) = checkpoint::load_store(&cb_path)?;

    let clips: Vec<eval::EvalClip> = test
        .iter()
        .map(|(row, mel)| eval::EvalClip {
            mel: mel.clone(),
            caption: row.caption.clone(),
            tags: {
                let mut t = vec![false; dataset::NUM_CLASSES];
                for c in &row.class_tags {
                    t[*c as usize] = true;
                }
                t
            },
        })
        .collect();

    let mut rows = Vec::new();
    for mode in [TextMode::NoFeat, TextMode::Pooled, TextMode::Full] {
        let prior_path = ckpt_dir.join(format!("prior_{}.svqa", mode.as_str()));
        if !prior_path.exists() {
            eprintln!("warning: skipping condition {} (no {})", mode.as_str(), prior_path.display());
            continue;
        }
        let (prior_store, _) = checkpoint::load_store(&prior_path)?;
        let mut store = cb_store.subset("");
        store.absorb(prior_store);
        let mut cond_cfg = cfg.clone();
        cond_cfg.text_mode = mode;
        let row = eval::evaluate_condition(
            &clf,
            mode.as_str(),
            &clips,
            |i, clip| {
                let sampler = SamplerConfig {
                    top_k: cond_cfg.top_k,
                    temperature: cond_cfg.temperature,
                    seed: seed.wrapping_add(i as u64),
                };
                let (mel, _) = prior::generate_mel(&store, &cond_cfg, &clip.caption, &sampler)?;
                Ok(mel.values)
            },
            threshold,
        )?;
        eprintln!(
            "{}\tpsnr {:.2} dB\tfid {:.4}\tmmkl {:.4}\tf1 {:.3}",
            row.condition, row.psnr_db, row.fid, row.mmkl_nats, row.tag_f1
        );
        rows.push(row);
    }
    let body = serde_json::to_string_pretty(&rows)
        .map_err(|e| SvqaError::InvalidArgument(format!("report serialization: {e}")))?;
    if let Some(parent) = report.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = report.with_extension("tmp");
    std::fs::write(&tmp, body)?;
    std::fs::rename(&tmp, report)?;
    eprintln!("wrote {}", report.display());
    Ok(())
}
