//! Flat `key = value` configuration with `#` comments. Keys are dotted
//! (`prior.layers = 4`); unknown keys are rejected with the offending line.

use crate::error::{Result, SvqaError};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextMode {
    NoFeat,
    Pooled,
    Full,
}

impl TextMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TextMode::NoFeat => "no_feat",
            TextMode::Pooled => "pooled",
            TextMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<TextMode> {
        match s {
            "no_feat" => Some(TextMode::NoFeat),
            "pooled" => Some(TextMode::Pooled),
            "full" => Some(TextMode::Full),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    // audio
    pub sample_rate: usize,
    pub clip_seconds: f64,
    pub n_fft: usize,
    pub hop: usize,
    pub mel_bands: usize,
    // codebook
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub beta: f64,
    pub lambda_adv: f64,
    pub lambda_perc: f64,
    pub warmup_steps: usize,
    pub conv_channels: usize,
    // prior
    pub prior_layers: usize,
    pub prior_width: usize,
    pub prior_heads: usize,
    pub top_k: usize,
    pub temperature: f64,
    // text
    pub text_mode: TextMode,
    pub max_text_len: usize,
    pub contrastive: bool,
    // training
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub codebook_steps: usize,
    pub prior_steps: usize,
    pub classifier_steps: usize,
    pub text_steps: usize,
    // paths
    pub data_dir: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            sample_rate: 16_000,
            clip_seconds: 2.56,
            n_fft: 512,
            hop: 128,
            mel_bands: 40,
            codebook_size: 128,
            latent_dim: 32,
            beta: 0.25,
            lambda_adv: 0.1,
            lambda_perc: 0.1,
            warmup_steps: 2000,
            conv_channels: 16,
            prior_layers: 4,
            prior_width: 128,
            prior_heads: 4,
            top_k: 64,
            temperature: 1.0,
            text_mode: TextMode::Full,
            max_text_len: 16,
            contrastive: false,
            lr: 3e-4,
            batch: 8,
            seed: 0,
            codebook_steps: 2000,
            prior_steps: 3000,
            classifier_steps: 600,
            text_steps: 600,
            data_dir: String::new(),
        }
    }
}

impl Config {
    /// Number of waveform samples per clip.
    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    /// Spectrogram frames T (one frame per hop, including the last partial).
    pub fn frames(&self) -> usize {
        self.clip_samples().div_ceil(self.hop)
    }

    /// Latent grid height m = mel_bands / 8.
    pub fn latent_rows(&self) -> usize {
        self.mel_bands / 8
    }

    /// Latent grid width t = frames / 8.
    pub fn latent_cols(&self) -> usize {
        self.frames() / 8
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| SvqaError::Config {
            path: path.display().to_string(),
            line: 0,
            detail: e.to_string(),
        })?;
        Config::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, path: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let err = |line: usize, detail: String| SvqaError::Config {
            path: path.to_string(),
            line,
            detail,
        };
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(lineno, format!("expected `key = value`, got `{raw}`")))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)
                .map_err(|detail| err(lineno, detail))?;
        }
        cfg.validate(path)?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse()
                .map_err(|_| format!("invalid value `{v}` for {key}"))
        }
        match key {
            "audio.sample_rate" => self.sample_rate = p(key, value)?,
            "audio.clip_seconds" => self.clip_seconds = p(key, value)?,
            "audio.n_fft" => self.n_fft = p(key, value)?,
            "audio.hop" => self.hop = p(key, value)?,
            "audio.mel_bands" => self.mel_bands = p(key, value)?,
            "codebook.size" => self.codebook_size = p(key, value)?,
            "codebook.n_z" => self.latent_dim = p(key, value)?,
            "codebook.beta" => self.beta = p(key, value)?,
            "codebook.lambda_adv" => self.lambda_adv = p(key, value)?,
            "codebook.lambda_perc" => self.lambda_perc = p(key, value)?,
            "codebook.warmup_steps" => self.warmup_steps = p(key, value)?,
            "codebook.channels" => self.conv_channels = p(key, value)?,
            "prior.layers" => self.prior_layers = p(key, value)?,
            "prior.width" => self.prior_width = p(key, value)?,
            "prior.heads" => self.prior_heads = p(key, value)?,
            "prior.top_k" => self.top_k = p(key, value)?,
            "prior.temperature" => self.temperature = p(key, value)?,
            "text.mode" => {
                self.text_mode = TextMode::parse(value)
                    .ok_or_else(|| format!("text.mode must be no_feat|pooled|full, got `{value}`"))?
            }
            "text.max_len" => self.max_text_len = p(key, value)?,
            "text.contrastive" => {
                self.contrastive = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(format!("text.contrastive must be true|false, got `{value}`")),
                }
            }
            "train.lr" => self.lr = p(key, value)?,
            "train.batch" => self.batch = p(key, value)?,
            "train.seed" => self.seed = p(key, value)?,
            "train.codebook_steps" => self.codebook_steps = p(key, value)?,
            "train.prior_steps" => self.prior_steps = p(key, value)?,
            "train.classifier_steps" => self.classifier_steps = p(key, value)?,
            "train.text_steps" => self.text_steps = p(key, value)?,
            "paths.data" => self.data_dir = value.to_string(),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn validate(&self, path: &str) -> Result<()> {
        let fail = |detail: String| {
            Err(SvqaError::Config {
                path: path.to_string(),
                line: 0,
                detail,
            })
        };
        if self.sample_rate == 0 || self.hop == 0 || self.n_fft == 0 {
            return fail("audio params must be positive".into());
        }
        if self.hop > self.n_fft {
            return fail(format!("hop {} exceeds n_fft {}", self.hop, self.n_fft));
        }
        if self.mel_bands % 8 != 0 {
            return fail(format!("mel_bands {} must be divisible by 8", self.mel_bands));
        }
        if self.frames() % 8 != 0 {
            return fail(format!(
                "frame count {} (clip_seconds x sample_rate / hop) must be divisible by 8",
                self.frames()
            ));
        }
        if self.codebook_size < 2 {
            return fail("codebook.size must be >= 2".into());
        }
        if !(self.top_k >= 1 && self.top_k <= self.codebook_size) {
            return fail(format!(
                "prior.top_k must be in [1, {}], got {}",
                self.codebook_size, self.top_k
            ));
        }
        if self.temperature <= 0.0 {
            return fail("prior.temperature must be positive".into());
        }
        if self.prior_width % self.prior_heads != 0 {
            return fail("prior.width must be divisible by prior.heads".into());
        }
        if self.lr <= 0.0 {
            return fail("train.lr must be positive".into());
        }
        if self.batch < 1 {
            return fail("train.batch must be >= 1".into());
        }
        if !(self.beta >= 0.0 && self.lambda_adv >= 0.0 && self.lambda_perc >= 0.0) {
            return fail("loss weights must be non-negative".into());
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "audio.sample_rate = {}", self.sample_rate);
        let _ = writeln!(s, "audio.clip_seconds = {}", self.clip_seconds);
        let _ = writeln!(s, "audio.n_fft = {}", self.n_fft);
        let _ = writeln!(s, "audio.hop = {}", self.hop);
        let _ = writeln!(s, "audio.mel_bands = {}", self.mel_bands);
        let _ = writeln!(s, "codebook.size = {}", self.codebook_size);
        let _ = writeln!(s, "codebook.n_z = {}", self.latent_dim);
        let _ = writeln!(s, "codebook.beta = {}", self.beta);
        let _ = writeln!(s, "codebook.lambda_adv = {}", self.lambda_adv);
        let _ = writeln!(s, "codebook.lambda_perc = {}", self.lambda_perc);
        let _ = writeln!(s, "codebook.warmup_steps = {}", self.warmup_steps);
        let _ = writeln!(s, "codebook.channels = {}", self.conv_channels);
        let _ = writeln!(s, "prior.layers = {}", self.prior_layers);
        let _ = writeln!(s, "prior.width = {}", self.prior_width);
        let _ = writeln!(s, "prior.heads = {}", self.prior_heads);
        let _ = writeln!(s, "prior.top_k = {}", self.top_k);
        let _ = writeln!(s, "prior.temperature = {}", self.temperature);
        let _ = writeln!(s, "text.mode = {}", self.text_mode.as_str());
        let _ = writeln!(s, "text.max_len = {}", self.max_text_len);
        let _ = writeln!(s, "text.contrastive = {}", self.contrastive);
        let _ = writeln!(s, "train.lr = {}", self.lr);
        let _ = writeln!(s, "train.batch = {}", self.batch);
        let _ = writeln!(s, "train.seed = {}", self.seed);
        let _ = writeln!(s, "train.codebook_steps = {}", self.codebook_steps);
        let _ = writeln!(s, "train.prior_steps = {}", self.prior_steps);
        let _ = writeln!(s, "train.classifier_steps = {}", self.classifier_steps);
        let _ = writeln!(s, "train.text_steps = {}", self.text_steps);
        if !self.data_dir.is_empty() {
            let _ = writeln!(s, "paths.data = {}", self.data_dir);
        }
        s
    }
}
