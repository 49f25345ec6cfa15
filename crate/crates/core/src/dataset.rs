//! Procedurally synthesized multi-event audio scenes with templated captions.
//!
//! Six synthetic sound classes, 1-3 events per scene with single / sequence
//! ("then") / overlap ("while") temporal relations. Every (scene, caption)
//! pair is consistent: the event classes are recoverable from the caption
//! tokens via each class's unique keyword.

use crate::config::Config;
use crate::dsp::{wav_write, Waveform};
use crate::error::{Result, SvqaError};
use crate::rng::Rng;
use crate::text::Vocabulary;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const NUM_CLASSES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SoundClass {
    Tone = 0,
    Chirp = 1,
    NoiseBurst = 2,
    SquareBeep = 3,
    AmTone = 4,
    ClickTrain = 5,
}

impl SoundClass {
    pub fn all() -> [SoundClass; NUM_CLASSES] {
        [
            SoundClass::Tone,
            SoundClass::Chirp,
            SoundClass::NoiseBurst,
            SoundClass::SquareBeep,
            SoundClass::AmTone,
            SoundClass::ClickTrain,
        ]
    }

    pub fn from_id(id: usize) -> SoundClass {
        Self::all()[id]
    }

    pub fn name(&self) -> &'static str {
        match self {
            SoundClass::Tone => "tone",
            SoundClass::Chirp => "chirp",
            SoundClass::NoiseBurst => "noise_burst",
            SoundClass::SquareBeep => "square_beep",
            SoundClass::AmTone => "am_tone",
            SoundClass::ClickTrain => "click_train",
        }
    }

    pub fn from_name(s: &str) -> Option<SoundClass> {
        Self::all().into_iter().find(|c| c.name() == s)
    }

    /// The caption word that uniquely identifies this class.
    pub fn keyword(&self) -> &'static str {
        match self {
            SoundClass::Tone => "tone",
            SoundClass::Chirp => "chirp",
            SoundClass::NoiseBurst => "noise",
            SoundClass::SquareBeep => "beep",
            SoundClass::AmTone => "warble",
            SoundClass::ClickTrain => "clicks",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Single,
    Sequence,
    Overlap,
}

impl Relation {
    pub fn name(&self) -> &'static str {
        match self {
            Relation::Single => "single",
            Relation::Sequence => "sequence",
            Relation::Overlap => "overlap",
        }
    }

    pub fn from_name(s: &str) -> Option<Relation> {
        match s {
            "single" => Some(Relation::Single),
            "sequence" => Some(Relation::Sequence),
            "overlap" => Some(Relation::Overlap),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SoundEvent {
    pub class: SoundClass,
    /// Seconds from clip start.
    pub onset: f64,
    pub duration: f64,
    /// Linear amplitude in (0, 1].
    pub gain: f64,
    pub base_freq: f64,
    /// Hz per second, chirps only.
    pub chirp_slope: f64,
    pub am_rate: f64,
    pub click_rate: f64,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub events: Vec<SoundEvent>,
    pub relation: Relation,
    pub seed: u64,
    pub clip_seconds: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.events.is_empty() || self.events.len() > 3 {
            return Err(SvqaError::InvalidArgument(format!(
                "scene must have 1-3 events, got {}",
                self.events.len()
            )));
        }
        for e in &self.events {
            if e.onset < 0.0 || e.onset + e.duration > self.clip_seconds + 1e-9 {
                return Err(SvqaError::InvalidArgument(format!(
                    "event [{:.2}, {:.2}] outside clip of {:.2}s",
                    e.onset,
                    e.onset + e.duration,
                    self.clip_seconds
                )));
            }
            if !(e.gain > 0.0 && e.gain <= 1.0) {
                return Err(SvqaError::InvalidArgument(format!("gain {} out of (0,1]", e.gain)));
            }
        }
        match self.relation {
            Relation::Single => {}
            Relation::Sequence => {
                for w in self.events.windows(2) {
                    if w[1].onset < w[0].onset + w[0].duration - 1e-9 {
                        return Err(SvqaError::InvalidArgument(
                            "sequence scene has overlapping events".into(),
                        ));
                    }
                }
            }
            Relation::Overlap => {
                if self.events.len() != 2 {
                    return Err(SvqaError::InvalidArgument(
                        "overlap scenes have exactly 2 events".into(),
                    ));
                }
                let a = &self.events[0];
                let b = &self.events[1];
                let overlap =
                    (a.onset + a.duration).min(b.onset + b.duration) - a.onset.max(b.onset);
                if overlap < 0.5 - 1e-9 {
                    return Err(SvqaError::InvalidArgument(format!(
                        "overlap scene shares only {overlap:.2}s"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> BTreeSet<SoundClass> {
        self.events.iter().map(|e| e.class).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub text: String,
    pub token_ids: Vec<usize>,
    pub class_tags: BTreeSet<SoundClass>,
}

/// Draw a random scene. Overlap scenes are only sampled when the clip is
/// long enough to guarantee the 0.5 s shared interval.
pub fn sample_scene(clip_seconds: f64, seed: u64) -> SceneSpec {
    let mut rng = Rng::new(seed).fork(0x5ce7e);
    let c = clip_seconds;
    let n_events = 1 + rng.below(3);
    let relation = match n_events {
        1 => Relation::Single,
        2 => {
            if c >= 1.2 && rng.uniform() < 0.5 {
                Relation::Overlap
            } else {
                Relation::Sequence
            }
        }
        _ => Relation::Sequence,
    };
    let class_ids = rng.choose_distinct(NUM_CLASSES, n_events);
    let mut events = Vec::with_capacity(n_events);
    let gain_hi = if n_events == 1 { 0.8 } else { 0.5 };
    for (i, &cid) in class_ids.iter().enumerate() {
        let class = SoundClass::from_id(cid);
        let (onset, duration) = match relation {
            Relation::Single => {
                let dur = rng.uniform_in(0.35 * c, 0.6 * c);
                let onset = rng.uniform_in(0.0, c - dur);
                (onset, dur)
            }
            Relation::Sequence => {
                let slot = c / n_events as f64;
                let dur = rng.uniform_in(0.5 * slot, 0.8 * slot);
                let onset = rng.uniform_in(i as f64 * slot, (i + 1) as f64 * slot - dur);
                (onset, dur)
            }
            Relation::Overlap => {
                let dur = rng.uniform_in(0.7 * c, 0.9 * c);
                let onset = rng.uniform_in(0.0, 0.05 * c);
                (onset, (dur).min(c - onset))
            }
        };
        let base_freq = rng.uniform_in(200.0, 900.0);
        let chirp_slope = rng.uniform_in(200.0, 1000.0) / duration.max(0.1);
        events.push(SoundEvent {
            class,
            onset,
            duration,
            gain: rng.uniform_in(0.35, gain_hi),
            base_freq,
            chirp_slope,
            am_rate: rng.uniform_in(4.0, 12.0),
            click_rate: rng.uniform_in(8.0, 20.0),
        });
    }
    SceneSpec {
        events,
        relation,
        seed,
        clip_seconds,
    }
}

fn event_samples(e: &SoundEvent, sample_rate: usize, rng: &mut Rng) -> Vec<f64> {
    let n = (e.duration * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut out = vec![0.0; n];
    match e.class {
        SoundClass::Tone => {
            for (i, v) in out.iter_mut().enumerate() {
                *v = (two_pi * e.base_freq * i as f64 / sr).sin();
            }
        }
        SoundClass::Chirp => {
            for (i, v) in out.iter_mut().enumerate() {
                let t = i as f64 / sr;
                // instantaneous phase of a linear sweep
                *v = (two_pi * (e.base_freq * t + 0.5 * e.chirp_slope * t * t)).sin();
            }
        }
        SoundClass::NoiseBurst => {
            for v in out.iter_mut() {
                *v = rng.uniform_in(-1.0, 1.0);
            }
        }
        SoundClass::SquareBeep => {
            for (i, v) in out.iter_mut().enumerate() {
                let s = (two_pi * e.base_freq * i as f64 / sr).sin();
                *v = if s >= 0.0 { 1.0 } else { -1.0 };
            }
        }
        SoundClass::AmTone => {
            for (i, v) in out.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let carrier = (two_pi * e.base_freq * t).sin();
                let env = 0.5 * (1.0 + (two_pi * e.am_rate * t).sin());
                *v = carrier * env;
            }
        }
        SoundClass::ClickTrain => {
            let period = (sr / e.click_rate).round() as usize;
            let click_len = (0.004 * sr) as usize;
            let mut pos = 0;
            while pos < n {
                for j in 0..click_len.min(n - pos) {
                    let t = j as f64 / sr;
                    let decay = (-t / 0.001).exp();
                    out[pos + j] += decay * (two_pi * 2000.0 * t).sin();
                }
                pos += period.max(1);
            }
        }
    }
    // 10 ms linear fade in/out keeps event energy inside its interval.
    let fade = ((0.01 * sr) as usize).min(n / 2);
    for i in 0..fade {
        let g = i as f64 / fade as f64;
        out[i] *= g;
        out[n - 1 - i] *= g;
    }
    for v in out.iter_mut() {
        *v *= e.gain;
    }
    out
}

/// Render a scene to audio. Deterministic given the spec's seed.
pub fn synth_scene(spec: &SceneSpec, sample_rate: usize) -> Result<Waveform> {
    spec.validate()?;
    let n = (spec.clip_seconds * sample_rate as f64).round() as usize;
    let mut samples = vec![0.0; n];
    for (i, e) in spec.events.iter().enumerate() {
        let mut rng = Rng::new(spec.seed).fork(100 + i as u64);
        let ev = event_samples(e, sample_rate, &mut rng);
        let start = (e.onset * sample_rate as f64).round() as usize;
        for (j, v) in ev.iter().enumerate() {
            if start + j < n {
                samples[start + j] += v;
            }
        }
    }
    let mut w = Waveform::new(samples, sample_rate);
    w.clamp();
    Ok(w)
}

struct Template {
    words: &'static [&'static str],
}

// "~" expands to a pitch adjective (low/high) from the event's base
// frequency. Every template contains the class keyword and stays within 4
// tokens so three clauses plus relation words fit in 16.
fn templates(class: SoundClass) -> [Template; 3] {
    let t = |words| Template { words };
    match class {
        SoundClass::Tone => [
            t(&["a", "~", "tone", "plays"] as &[_]),
            t(&["a", "steady", "tone", "hums"]),
            t(&["a", "pure", "tone", "sounds"]),
        ],
        SoundClass::Chirp => [
            t(&["a", "chirp", "sweeps", "upward"] as &[_]),
            t(&["a", "rising", "chirp", "sounds"]),
            t(&["a", "quick", "chirp", "slides"]),
        ],
        SoundClass::NoiseBurst => [
            t(&["white", "noise", "hisses"] as &[_]),
            t(&["harsh", "noise", "rushes"]),
            t(&["a", "noise", "burst", "hisses"]),
        ],
        SoundClass::SquareBeep => [
            t(&["a", "square", "beep", "buzzes"] as &[_]),
            t(&["a", "sharp", "beep", "sounds"]),
            t(&["a", "~", "beep", "repeats"]),
        ],
        SoundClass::AmTone => [
            t(&["a", "warble", "wavers"] as &[_]),
            t(&["a", "slow", "warble", "trembles"]),
            t(&["a", "~", "warble", "pulses"]),
        ],
        SoundClass::ClickTrain => [
            t(&["rapid", "clicks", "tick"] as &[_]),
            t(&["steady", "clicks", "patter"]),
            t(&["quick", "clicks", "tap"]),
        ],
    }
}

/// Deterministic template fill; one of three paraphrases per event, chosen
/// by the scene seed.
pub fn caption_of(spec: &SceneSpec, vocab: &Vocabulary) -> Caption {
    let mut rng = Rng::new(spec.seed).fork(0xca9);
    let mut words: Vec<String> = Vec::new();
    let relation_word = match spec.relation {
        Relation::Single => None,
        Relation::Sequence => Some("then"),
        Relation::Overlap => Some("while"),
    };
    for (i, e) in spec.events.iter().enumerate() {
        if i > 0 {
            words.push(relation_word.expect("multi-event scene without relation").into());
        }
        let tpl = &templates(e.class)[rng.below(3)];
        for &w in tpl.words {
            if w == "~" {
                words.push(if e.base_freq < 440.0 { "low" } else { "high" }.into());
            } else {
                words.push(w.into());
            }
        }
    }
    let text = words.join(" ");
    let token_ids = vocab.encode(&text);
    Caption {
        text,
        token_ids,
        class_tags: spec.classes(),
    }
}

/// Recover the class tags present in a caption from its keywords.
pub fn tags_from_text(text: &str) -> BTreeSet<SoundClass> {
    text.split_whitespace()
        .filter_map(|w| SoundClass::all().into_iter().find(|c| c.keyword() == w))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub id: String,
    pub wav_path: String,
    pub caption: String,
    pub token_ids: Vec<usize>,
    pub class_tags: BTreeSet<SoundClass>,
    pub relation: Relation,
    /// (class, onset, duration) triples.
    pub events: Vec<(SoundClass, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub rows: Vec<ManifestRow>,
    pub root: PathBuf,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// 80/10/10 split: ids ordered by hash, first 80% train, then val, then test.
pub fn split_assignment(ids: &[String]) -> Vec<Split> {
    let n = ids.len();
    let n_val = (n / 10).max(usize::from(n >= 3));
    let n_test = n_val;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (fnv1a(&ids[i]), i));
    let mut out = vec![Split::Train; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n - n_val - n_test {
            Split::Train
        } else if rank < n - n_test {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

fn manifest_line(row: &ManifestRow) -> String {
    let mut s = String::new();
    let ids: Vec<String> = row.token_ids.iter().map(|v| v.to_string()).collect();
    let tags: Vec<&str> = row.class_tags.iter().map(|c| c.name()).collect();
    let events: Vec<String> = row
        .events
        .iter()
        .map(|(c, o, d)| format!("{}:{:.4}:{:.4}", c.name(), o, d))
        .collect();
    let _ = write!(
        s,
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        row.id,
        row.wav_path,
        row.caption,
        ids.join(","),
        tags.join(","),
        row.relation.name(),
        events.join(";")
    );
    s
}

fn parse_manifest_line(line: &str, lineno: usize) -> Result<ManifestRow> {
    let bad = |m: String| SvqaError::InvalidArgument(format!("manifest line {lineno}: {m}"));
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 7 {
        return Err(bad(format!("expected 7 columns, got {}", cols.len())));
    }
    let token_ids = if cols[3].is_empty() {
        vec![]
    } else {
        cols[3]
            .split(',')
            .map(|v| v.parse().map_err(|_| bad(format!("bad token id `{v}`"))))
            .collect::<Result<_>>()?
    };
    let class_tags = cols[4]
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| SoundClass::from_name(s).ok_or_else(|| bad(format!("unknown class `{s}`"))))
        .collect::<Result<_>>()?;
    let relation =
        Relation::from_name(cols[5]).ok_or_else(|| bad(format!("unknown relation `{}`", cols[5])))?;
    let events = cols[6]
        .split(';')
        .filter(|s| !s.is_empty())
        .map(|e| {
            let parts: Vec<&str> = e.split(':').collect();
            if parts.len() != 3 {
                return Err(bad(format!("bad event `{e}`")));
            }
            let c = SoundClass::from_name(parts[0])
                .ok_or_else(|| bad(format!("unknown class `{}`", parts[0])))?;
            let o = parts[1].parse().map_err(|_| bad(format!("bad onset `{}`", parts[1])))?;
            let d = parts[2]
                .parse()
                .map_err(|_| bad(format!("bad duration `{}`", parts[2])))?;
            Ok((c, o, d))
        })
        .collect::<Result<_>>()?;
    Ok(ManifestRow {
        id: cols[0].to_string(),
        wav_path: cols[1].to_string(),
        caption: cols[2].to_string(),
        token_ids,
        class_tags,
        relation,
        events,
    })
}

impl Corpus {
    pub fn load(manifest: &Path) -> Result<Corpus> {
        let text = std::fs::read_to_string(manifest)?;
        let rows = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| parse_manifest_line(l, i + 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            rows,
            root: manifest.parent().unwrap_or(Path::new(".")).to_path_buf(),
        })
    }

    pub fn splits(&self) -> Vec<Split> {
        let ids: Vec<String> = self.rows.iter().map(|r| r.id.clone()).collect();
        split_assignment(&ids)
    }

    pub fn rows_in(&self, split: Split) -> Vec<&ManifestRow> {
        self.splits()
            .into_iter()
            .zip(&self.rows)
            .filter(|(s, _)| *s == split)
            .map(|(_, r)| r)
            .collect()
    }

    pub fn wav_path(&self, row: &ManifestRow) -> PathBuf {
        self.root.join(&row.wav_path)
    }
}

/// Synthesize `n` scenes into `out_dir` (WAVs under wav/, manifest.tsv at
/// the root). Pure function of (n, seed) for a fixed config.
pub fn generate_corpus(cfg: &Config, n: usize, seed: u64, out_dir: &Path) -> Result<Corpus> {
    if n < 1 {
        return Err(SvqaError::InvalidArgument("corpus size must be >= 1".into()));
    }
    let vocab = Vocabulary::new();
    std::fs::create_dir_all(out_dir.join("wav"))?;
    let mut rows = Vec::with_capacity(n);
    let root = Rng::new(seed);
    for i in 0..n {
        let scene_seed = root.fork(i as u64).next_u64_peek();
        let spec = sample_scene(cfg.clip_seconds, scene_seed);
        let wav = synth_scene(&spec, cfg.sample_rate)?;
        let id = format!("clip_{i:06}");
        let rel = format!("wav/{id}.wav");
        wav_write(&out_dir.join(&rel), &wav)?;
        let caption = caption_of(&spec, &vocab);
        rows.push(ManifestRow {
            id,
            wav_path: rel,
            caption: caption.text,
            token_ids: caption.token_ids,
            class_tags: caption.class_tags,
            relation: spec.relation,
            events: spec
                .events
                .iter()
                .map(|e| (e.class, e.onset, e.duration))
                .collect(),
        });
    }
    let manifest: String = rows
        .iter()
        .map(manifest_line)
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    std::fs::write(out_dir.join("manifest.tsv"), manifest)?;
    Ok(Corpus {
        rows,
        root: out_dir.to_path_buf(),
    })
}

impl Rng {
    /// First draw of this stream without mutating it.
    fn next_u64_peek(&self) -> u64 {
        self.clone().next_u64()
    }
}
