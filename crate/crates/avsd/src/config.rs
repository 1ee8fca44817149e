//! Run configuration: a line-oriented `key = value` format with
//! `[section]` headers, full defaults, strict unknown-key rejection, and
//! a canonical rendering whose SHA-256 digest stamps every artifact.
//!
//! Sections: corpus, model, pretrain, finetune, adapt, decode, score.
//! Lines starting with `#` and blank lines are ignored. Every error
//! carries the 1-based line number it came from.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::{CorpusSpec, Lang, View};
use crate::error::{Error, Result};
use crate::model::ModelDims;

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub steps: u64,
    pub utts_per_step: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub constant_frac: f64,
    pub audio_mask_coverage: f64,
    pub audio_mask_span: usize,
    pub video_mask_coverage: f64,
    pub video_mask_span: usize,
    /// Probability of keeping both modalities at a training step.
    pub p_m: f64,
    /// Probability of keeping only audio, given one modality is dropped.
    pub p_a: f64,
    pub noise_prob: f64,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub ema_warmup_steps: u64,
    /// How many topmost encoder blocks form the distillation target.
    pub target_layers: usize,
    /// Normalize targets per channel over time (true) or per frame over
    /// channels (false).
    pub instance_norm_over_time: bool,
    /// Visual stream fed to the model.
    pub view: View,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 400,
            utts_per_step: 1,
            peak_lr: 2e-3,
            warmup_frac: 0.03,
            constant_frac: 0.90,
            audio_mask_coverage: 0.8,
            audio_mask_span: 10,
            video_mask_coverage: 0.3,
            video_mask_span: 5,
            p_m: 0.5,
            p_a: 0.5,
            noise_prob: 0.25,
            snr_db_min: 0.0,
            snr_db_max: 10.0,
            ema_start: 0.999,
            ema_end: 0.9999,
            ema_warmup_steps: 30_000,
            target_layers: 3,
            instance_norm_over_time: true,
            view: View::Lip,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub utts_per_step: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub constant_frac: f64,
    /// CTC weight in the joint loss.
    pub mu: f64,
    /// Encoder frozen for this many leading updates; forced to 0 when
    /// `transfer` is set.
    pub freeze_steps: u64,
    pub transfer: bool,
    /// Per-speaker fraction of utterances held out for validation.
    pub val_fraction: f64,
    /// Leading fraction of the remaining training utterances to use.
    pub data_fraction: f64,
    pub view: View,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 300,
            utts_per_step: 1,
            peak_lr: 1e-3,
            warmup_frac: 0.10,
            constant_frac: 0.40,
            mu: 0.1,
            freeze_steps: 0,
            transfer: false,
            val_fraction: 0.2,
            data_fraction: 1.0,
            view: View::Lip,
            seed: 43,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdaptConfig {
    pub steps: u64,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub constant_frac: f64,
    /// Interpolation weight of the speaker-independent posteriors in the
    /// adaptation targets; 0 recovers plain cross-entropy.
    pub rho: f64,
    pub mu: f64,
    /// Held-out fraction of the speaker's utterances (validation side of
    /// the 8:2 split).
    pub val_fraction: f64,
    /// Speaker to adapt to; usually supplied per run via --set.
    pub speaker: String,
    pub view: View,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            steps: 60,
            peak_lr: 5e-4,
            warmup_frac: 0.1,
            constant_frac: 0.0,
            rho: 0.1,
            mu: 0.1,
            val_fraction: 0.2,
            speaker: String::new(),
            view: View::Lip,
            seed: 44,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecodeConfig {
    pub beam: usize,
    /// CTC weight in the joint per-step score.
    pub alpha: f64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 8,
            alpha: 0.1,
            max_len: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScoreConfig {
    pub bootstrap_samples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            bootstrap_samples: 10_000,
            confidence: 0.95,
            seed: 45,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub model: ModelDims,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub adapt: AdaptConfig,
    pub decode: DecodeConfig,
    pub score: ScoreConfig,
}

fn cfg_err(path: &str, line: usize, detail: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_owned(),
        line,
        detail: detail.into(),
    }
}

fn parse_num<T: std::str::FromStr>(path: &str, line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| cfg_err(path, line, format!("invalid value {value:?} for {key}")))
}

fn parse_bool(path: &str, line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(cfg_err(
            path,
            line,
            format!("invalid value {value:?} for {key} (expected true or false)"),
        )),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses a config file body. `path` is used in error messages only.
    pub fn parse(text: &str, path: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| cfg_err(path, line_no, "unterminated section header"))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(cfg_err(path, line_no, format!("unknown section [{name}]")));
                }
                section = name.to_owned();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(path, line_no, "expected key = value"))?;
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                return Err(cfg_err(path, line_no, format!("key {key} before any [section]")));
            }
            cfg.apply(&section, key, value, path, line_no)?;
        }
        cfg.validate(path)?;
        Ok(cfg)
    }

    /// Applies `--set section.key=value` overrides after file parsing.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for (i, s) in sets.iter().enumerate() {
            let path = format!("--set #{}", i + 1);
            let (target, value) = s
                .split_once('=')
                .ok_or_else(|| cfg_err(&path, 0, format!("expected section.key=value, got {s:?}")))?;
            let (section, key) = target
                .trim()
                .split_once('.')
                .ok_or_else(|| cfg_err(&path, 0, format!("expected section.key, got {target:?}")))?;
            if !SECTIONS.contains(&section) {
                return Err(cfg_err(&path, 0, format!("unknown section {section:?}")));
            }
            self.apply(section, key, value.trim(), &path, 0)?;
        }
        self.validate("--set")?;
        Ok(())
    }

    fn apply(&mut self, section: &str, key: &str, value: &str, path: &str, line: usize) -> Result<()> {
        macro_rules! num {
            ($field:expr) => {
                $field = parse_num(path, line, key, value)?
            };
        }
        match section {
            "corpus" => match key {
                "num_speakers" => num!(self.corpus.num_speakers),
                "utterances_per_speaker" => num!(self.corpus.utterances_per_speaker),
                "phone_inventory" => num!(self.corpus.phone_inventory),
                "lang" => {
                    self.corpus.lang = Lang::parse(value)
                        .map_err(|_| cfg_err(path, line, format!("lang must be source or target, got {value:?}")))?
                }
                "overlap_fraction" => num!(self.corpus.overlap_fraction),
                "occlusion_prob" => num!(self.corpus.occlusion_prob),
                "min_phones" => num!(self.corpus.min_phones),
                "max_phones" => num!(self.corpus.max_phones),
                "master_seed" => num!(self.corpus.master_seed),
                "template_seed" => num!(self.corpus.template_seed),
                _ => return Err(unknown_key(path, line, section, key)),
            },
            "model" => match key {
                "width" => num!(self.model.width),
                "enc_blocks" => num!(self.model.enc_blocks),
                "dec_blocks" => num!(self.model.dec_blocks),
                "heads" => num!(self.model.heads),
                "ffn" => num!(self.model.ffn),
                "n_tokens" => num!(self.model.n_tokens),
                "conv_pos_kernel" => num!(self.model.conv_pos_kernel),
                _ => return Err(unknown_key(path, line, section, key)),
            },
            "pretrain" => match key {
                "steps" => num!(self.pretrain.steps),
                "utts_per_step" => num!(self.pretrain.utts_per_step),
                "peak_lr" => num!(self.pretrain.peak_lr),
                "warmup_frac" => num!(self.pretrain.warmup_frac),
                "constant_frac" => num!(self.pretrain.constant_frac),
                "audio_mask_coverage" => num!(self.pretrain.audio_mask_coverage),
                "audio_mask_span" => num!(self.pretrain.audio_mask_span),
                "video_mask_coverage" => num!(self.pretrain.video_mask_coverage),
                "video_mask_span" => num!(self.pretrain.video_mask_span),
                "p_m" => num!(self.pretrain.p_m),
                "p_a" => num!(self.pretrain.p_a),
                "noise_prob" => num!(self.pretrain.noise_prob),
                "snr_db_min" => num!(self.pretrain.snr_db_min),
                "snr_db_max" => num!(self.pretrain.snr_db_max),
                "ema_start" => num!(self.pretrain.ema_start),
                "ema_end" => num!(self.pretrain.ema_end),
                "ema_warmup_steps" => num!(self.pretrain.ema_warmup_steps),
                "target_layers" => num!(self.pretrain.target_layers),
                "instance_norm_over_time" => {
                    self.pretrain.instance_norm_over_time = parse_bool(path, line, key, value)?
                }
                "view" => self.pretrain.view = parse_view(path, line, value)?,
                "seed" => num!(self.pretrain.seed),
                _ => return Err(unknown_key(path, line, section, key)),
            },
            "finetune" => match key {
                "steps" => num!(self.finetune.steps),
                "utts_per_step" => num!(self.finetune.utts_per_step),
                "peak_lr" => num!(self.finetune.peak_lr),
                "warmup_frac" => num!(self.finetune.warmup_frac),
                "constant_frac" => num!(self.finetune.constant_frac),
                "mu" => num!(self.finetune.mu),
                "freeze_steps" => num!(self.finetune.freeze_steps),
                "transfer" => self.finetune.transfer = parse_bool(path, line, key, value)?,
                "val_fraction" => num!(self.finetune.val_fraction),
                "data_fraction" => num!(self.finetune.data_fraction),
                "view" => self.finetune.view = parse_view(path, line, value)?,
                "seed" => num!(self.finetune.seed),
                _ => return Err(unknown_key(path, line, section, key)),
            },
            "adapt" => match key {
                "steps" => num!(self.adapt.steps),
                "peak_lr" => num!(self.adapt.peak_lr),
                "warmup_frac" => num!(self.adapt.warmup_frac),
                "constant_frac" => num!(self.adapt.constant_frac),
                "rho" => num!(self.adapt.rho),
                "mu" => num!(self.adapt.mu),
                "val_fraction" => num!(self.adapt.val_fraction),
                "speaker" => self.adapt.speaker = value.to_owned(),
                "view" => self.adapt.view = parse_view(path, line, value)?,
                "seed" => num!(self.adapt.seed),
                _ => return Err(unknown_key(path, line, section, key)),
            },
            "decode" => match key {
                "beam" => num!(self.decode.beam),
                "alpha" => num!(self.decode.alpha),
                "max_len" => num!(self.decode.max_len),
                _ => return Err(unknown_key(path, line, section, key)),
            },
            "score" => match key {
                "bootstrap_samples" => num!(self.score.bootstrap_samples),
                "confidence" => num!(self.score.confidence),
                "seed" => num!(self.score.seed),
                _ => return Err(unknown_key(path, line, section, key)),
            },
            _ => return Err(cfg_err(path, line, format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    fn validate(&self, path: &str) -> Result<()> {
        let err = |detail: String| Err(cfg_err(path, 0, detail));
        self.corpus.validate().map_err(|e| cfg_err(path, 0, e.to_string()))?;
        let probs: [(&str, f64); 12] = [
            ("pretrain.audio_mask_coverage", self.pretrain.audio_mask_coverage),
            ("pretrain.video_mask_coverage", self.pretrain.video_mask_coverage),
            ("pretrain.p_m", self.pretrain.p_m),
            ("pretrain.p_a", self.pretrain.p_a),
            ("pretrain.noise_prob", self.pretrain.noise_prob),
            ("pretrain.ema_start", self.pretrain.ema_start),
            ("pretrain.ema_end", self.pretrain.ema_end),
            ("finetune.val_fraction", self.finetune.val_fraction),
            ("finetune.data_fraction", self.finetune.data_fraction),
            ("adapt.rho", self.adapt.rho),
            ("adapt.val_fraction", self.adapt.val_fraction),
            ("decode.alpha", self.decode.alpha),
        ];
        for (name, v) in probs {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        for (name, warm, constant) in [
            ("pretrain", self.pretrain.warmup_frac, self.pretrain.constant_frac),
            ("finetune", self.finetune.warmup_frac, self.finetune.constant_frac),
            ("adapt", self.adapt.warmup_frac, self.adapt.constant_frac),
        ] {
            if !(0.0..=1.0).contains(&warm) || !(0.0..=1.0).contains(&constant) || warm + constant > 1.0 {
                return err(format!("{name} warmup_frac + constant_frac must stay within [0, 1]"));
            }
        }
        if self.finetune.mu < 0.0 || self.adapt.mu < 0.0 {
            return err("mu must be nonnegative".into());
        }
        if self.pretrain.audio_mask_span == 0 || self.pretrain.video_mask_span == 0 {
            return err("mask spans must be at least 1".into());
        }
        if self.pretrain.utts_per_step == 0 || self.finetune.utts_per_step == 0 {
            return err("utts_per_step must be at least 1".into());
        }
        if self.pretrain.snr_db_min > self.pretrain.snr_db_max {
            return err("pretrain.snr_db_min must not exceed snr_db_max".into());
        }
        if self.model.width == 0 || self.model.heads == 0 || self.model.width % self.model.heads != 0 {
            return err(format!(
                "model.width ({}) must be a positive multiple of model.heads ({})",
                self.model.width, self.model.heads
            ));
        }
        if self.model.conv_pos_kernel % 2 == 0 {
            return err("model.conv_pos_kernel must be odd".into());
        }
        if self.model.enc_blocks == 0 || self.model.dec_blocks == 0 {
            return err("model block counts must be at least 1".into());
        }
        if !(1..=32).contains(&self.model.n_tokens) {
            return err(format!("model.n_tokens must be in 1..=32, got {}", self.model.n_tokens));
        }
        if self.pretrain.target_layers == 0 || self.pretrain.target_layers > self.model.enc_blocks {
            return err(format!(
                "pretrain.target_layers must be in 1..={}, got {}",
                self.model.enc_blocks, self.pretrain.target_layers
            ));
        }
        if self.decode.beam == 0 {
            return err("decode.beam must be at least 1".into());
        }
        if self.decode.max_len == 0 {
            return err("decode.max_len must be at least 1".into());
        }
        if self.score.bootstrap_samples == 0 {
            return err("score.bootstrap_samples must be at least 1".into());
        }
        if !(self.score.confidence > 0.0 && self.score.confidence < 1.0) {
            return err(format!("score.confidence must be in (0, 1), got {}", self.score.confidence));
        }
        Ok(())
    }

    /// Deterministic full rendering: every key in a fixed order. Parsing
    /// the rendering reproduces the config.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let c = &self.corpus;
        writeln!(s, "[corpus]").unwrap();
        writeln!(s, "num_speakers = {}", c.num_speakers).unwrap();
        writeln!(s, "utterances_per_speaker = {}", c.utterances_per_speaker).unwrap();
        writeln!(s, "phone_inventory = {}", c.phone_inventory).unwrap();
        writeln!(s, "lang = {}", c.lang.as_str()).unwrap();
        writeln!(s, "overlap_fraction = {}", c.overlap_fraction).unwrap();
        writeln!(s, "occlusion_prob = {}", c.occlusion_prob).unwrap();
        writeln!(s, "min_phones = {}", c.min_phones).unwrap();
        writeln!(s, "max_phones = {}", c.max_phones).unwrap();
        writeln!(s, "master_seed = {}", c.master_seed).unwrap();
        writeln!(s, "template_seed = {}", c.template_seed).unwrap();
        let m = &self.model;
        writeln!(s, "[model]").unwrap();
        writeln!(s, "width = {}", m.width).unwrap();
        writeln!(s, "enc_blocks = {}", m.enc_blocks).unwrap();
        writeln!(s, "dec_blocks = {}", m.dec_blocks).unwrap();
        writeln!(s, "heads = {}", m.heads).unwrap();
        writeln!(s, "ffn = {}", m.ffn).unwrap();
        writeln!(s, "n_tokens = {}", m.n_tokens).unwrap();
        writeln!(s, "conv_pos_kernel = {}", m.conv_pos_kernel).unwrap();
        let p = &self.pretrain;
        writeln!(s, "[pretrain]").unwrap();
        writeln!(s, "steps = {}", p.steps).unwrap();
        writeln!(s, "utts_per_step = {}", p.utts_per_step).unwrap();
        writeln!(s, "peak_lr = {}", p.peak_lr).unwrap();
        writeln!(s, "warmup_frac = {}", p.warmup_frac).unwrap();
        writeln!(s, "constant_frac = {}", p.constant_frac).unwrap();
        writeln!(s, "audio_mask_coverage = {}", p.audio_mask_coverage).unwrap();
        writeln!(s, "audio_mask_span = {}", p.audio_mask_span).unwrap();
        writeln!(s, "video_mask_coverage = {}", p.video_mask_coverage).unwrap();
        writeln!(s, "video_mask_span = {}", p.video_mask_span).unwrap();
        writeln!(s, "p_m = {}", p.p_m).unwrap();
        writeln!(s, "p_a = {}", p.p_a).unwrap();
        writeln!(s, "noise_prob = {}", p.noise_prob).unwrap();
        writeln!(s, "snr_db_min = {}", p.snr_db_min).unwrap();
        writeln!(s, "snr_db_max = {}", p.snr_db_max).unwrap();
        writeln!(s, "ema_start = {}", p.ema_start).unwrap();
        writeln!(s, "ema_end = {}", p.ema_end).unwrap();
        writeln!(s, "ema_warmup_steps = {}", p.ema_warmup_steps).unwrap();
        writeln!(s, "target_layers = {}", p.target_layers).unwrap();
        writeln!(s, "instance_norm_over_time = {}", p.instance_norm_over_time).unwrap();
        writeln!(s, "view = {}", p.view.as_str()).unwrap();
        writeln!(s, "seed = {}", p.seed).unwrap();
        let f = &self.finetune;
        writeln!(s, "[finetune]").unwrap();
        writeln!(s, "steps = {}", f.steps).unwrap();
        writeln!(s, "utts_per_step = {}", f.utts_per_step).unwrap();
        writeln!(s, "peak_lr = {}", f.peak_lr).unwrap();
        writeln!(s, "warmup_frac = {}", f.warmup_frac).unwrap();
        writeln!(s, "constant_frac = {}", f.constant_frac).unwrap();
        writeln!(s, "mu = {}", f.mu).unwrap();
        writeln!(s, "freeze_steps = {}", f.freeze_steps).unwrap();
        writeln!(s, "transfer = {}", f.transfer).unwrap();
        writeln!(s, "val_fraction = {}", f.val_fraction).unwrap();
        writeln!(s, "data_fraction = {}", f.data_fraction).unwrap();
        writeln!(s, "view = {}", f.view.as_str()).unwrap();
        writeln!(s, "seed = {}", f.seed).unwrap();
        let a = &self.adapt;
        writeln!(s, "[adapt]").unwrap();
        writeln!(s, "steps = {}", a.steps).unwrap();
        writeln!(s, "peak_lr = {}", a.peak_lr).unwrap();
        writeln!(s, "warmup_frac = {}", a.warmup_frac).unwrap();
        writeln!(s, "constant_frac = {}", a.constant_frac).unwrap();
        writeln!(s, "rho = {}", a.rho).unwrap();
        writeln!(s, "mu = {}", a.mu).unwrap();
        writeln!(s, "val_fraction = {}", a.val_fraction).unwrap();
        writeln!(s, "speaker = {}", a.speaker).unwrap();
        writeln!(s, "view = {}", a.view.as_str()).unwrap();
        writeln!(s, "seed = {}", a.seed).unwrap();
        let d = &self.decode;
        writeln!(s, "[decode]").unwrap();
        writeln!(s, "beam = {}", d.beam).unwrap();
        writeln!(s, "alpha = {}", d.alpha).unwrap();
        writeln!(s, "max_len = {}", d.max_len).unwrap();
        let sc = &self.score;
        writeln!(s, "[score]").unwrap();
        writeln!(s, "bootstrap_samples = {}", sc.bootstrap_samples).unwrap();
        writeln!(s, "confidence = {}", sc.confidence).unwrap();
        writeln!(s, "seed = {}", sc.seed).unwrap();
        s
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }
}

const SECTIONS: [&str; 7] = ["corpus", "model", "pretrain", "finetune", "adapt", "decode", "score"];

fn parse_view(path: &str, line: usize, value: &str) -> Result<View> {
    View::parse(value).map_err(|_| cfg_err(path, line, format!("view must be lip or face, got {value:?}")))
}

fn unknown_key(path: &str, line: usize, section: &str, key: &str) -> Error {
    cfg_err(path, line, format!("unknown key {key:?} in section [{section}]"))
}
