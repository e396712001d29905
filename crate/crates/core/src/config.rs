//! Run configuration: every tunable of the pipeline in one struct, read
//! from and written to flat `key = value` text with `#` comments.
//!
//! Defaults follow the published recipe where it states values (margin 0.5,
//! scale 30, lr 0.01 halved every 2 epochs, weight decay 5e-4, loss weights
//! 1 and 0.5) and desk-scale choices everywhere else. Serialization is
//! canonical: fixed key order, shortest round-trip float text, so a config
//! snapshot embedded in a checkpoint is stable byte for byte.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Which parameter subset a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    UnimodalAudio,
    UnimodalVisual,
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::UnimodalAudio => "unimodal_audio",
            Stage::UnimodalVisual => "unimodal_visual",
            Stage::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unimodal_audio" => Ok(Stage::UnimodalAudio),
            "unimodal_visual" => Ok(Stage::UnimodalVisual),
            "joint" => Ok(Stage::Joint),
            other => Err(Error::contract(format!(
                "stage: unknown value '{other}' (expected unimodal_audio, unimodal_visual, or joint)"
            ))),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Stage::UnimodalAudio => 0,
            Stage::UnimodalVisual => 1,
            Stage::Joint => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Stage::UnimodalAudio),
            1 => Ok(Stage::UnimodalVisual),
            2 => Ok(Stage::Joint),
            other => Err(Error::contract(format!("unknown stage code {other}"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// All tunables of a run. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    pub train_manifest: String,

    pub channels: usize,
    pub bottleneck: usize,
    pub embed_dim: usize,
    pub audio_track_len: usize,
    pub visual_track_len: usize,
    pub audio_in_dim: usize,
    pub visual_size: usize,

    pub margin: f64,
    pub scale: f64,
    pub beta: f64,
    pub gamma: f64,
    pub ortho_weight: f64,

    pub lr: f64,
    pub lr_halve_every: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub freeze_backbones: bool,

    pub top_k: usize,
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,

    pub n_identities: usize,
    pub utts_per_identity: usize,
    pub train_utts_per_identity: usize,
    pub audio_frames: usize,
    pub visual_frames: usize,
    pub noise_sigma: f64,
    pub keyframe_overlap: f64,
    pub keyframe_frac: f64,
    pub proto_margin: f64,
    pub n_target_trials: usize,
    pub n_nontarget_trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stage: Stage::Joint,
            seed: 17,
            train_manifest: String::new(),

            channels: 16,
            bottleneck: 16,
            embed_dim: 32,
            audio_track_len: 20,
            visual_track_len: 8,
            audio_in_dim: 24,
            visual_size: 16,

            margin: 0.5,
            scale: 30.0,
            beta: 1.0,
            gamma: 0.5,
            ortho_weight: 0.1,

            lr: 0.01,
            lr_halve_every: 2,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs: 10,
            freeze_backbones: false,

            top_k: 50,
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,

            n_identities: 64,
            utts_per_identity: 20,
            train_utts_per_identity: 16,
            audio_frames: 20,
            visual_frames: 8,
            noise_sigma: 0.3,
            keyframe_overlap: 0.0,
            keyframe_frac: 0.5,
            proto_margin: 4.0,
            n_target_trials: 400,
            n_nontarget_trials: 400,
        }
    }
}

macro_rules! config_keys {
    ($on:ident, $cfg:expr) => {
        $on!($cfg, stage);
        $on!($cfg, seed);
        $on!($cfg, train_manifest);
        $on!($cfg, channels);
        $on!($cfg, bottleneck);
        $on!($cfg, embed_dim);
        $on!($cfg, audio_track_len);
        $on!($cfg, visual_track_len);
        $on!($cfg, audio_in_dim);
        $on!($cfg, visual_size);
        $on!($cfg, margin);
        $on!($cfg, scale);
        $on!($cfg, beta);
        $on!($cfg, gamma);
        $on!($cfg, ortho_weight);
        $on!($cfg, lr);
        $on!($cfg, lr_halve_every);
        $on!($cfg, weight_decay);
        $on!($cfg, batch_size);
        $on!($cfg, epochs);
        $on!($cfg, freeze_backbones);
        $on!($cfg, top_k);
        $on!($cfg, p_target);
        $on!($cfg, c_miss);
        $on!($cfg, c_fa);
        $on!($cfg, n_identities);
        $on!($cfg, utts_per_identity);
        $on!($cfg, train_utts_per_identity);
        $on!($cfg, audio_frames);
        $on!($cfg, visual_frames);
        $on!($cfg, noise_sigma);
        $on!($cfg, keyframe_overlap);
        $on!($cfg, keyframe_frac);
        $on!($cfg, proto_margin);
        $on!($cfg, n_target_trials);
        $on!($cfg, n_nontarget_trials);
    };
}

trait ConfigValue: Sized {
    fn render(&self) -> String;
    fn parse_value(key: &str, raw: &str) -> Result<Self>;
}

impl ConfigValue for Stage {
    fn render(&self) -> String {
        self.name().to_string()
    }
    fn parse_value(_key: &str, raw: &str) -> Result<Self> {
        Stage::parse(raw)
    }
}

impl ConfigValue for String {
    fn render(&self) -> String {
        self.clone()
    }
    fn parse_value(_key: &str, raw: &str) -> Result<Self> {
        Ok(raw.to_string())
    }
}

impl ConfigValue for u64 {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse_value(key: &str, raw: &str) -> Result<Self> {
        raw.parse()
            .map_err(|_| Error::contract(format!("{key}: expected unsigned integer, got '{raw}'")))
    }
}

impl ConfigValue for usize {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse_value(key: &str, raw: &str) -> Result<Self> {
        raw.parse()
            .map_err(|_| Error::contract(format!("{key}: expected unsigned integer, got '{raw}'")))
    }
}

impl ConfigValue for f64 {
    fn render(&self) -> String {
        format!("{self}")
    }
    fn parse_value(key: &str, raw: &str) -> Result<Self> {
        raw.parse()
            .map_err(|_| Error::contract(format!("{key}: expected number, got '{raw}'")))
    }
}

impl ConfigValue for bool {
    fn render(&self) -> String {
        self.to_string()
    }
    fn parse_value(key: &str, raw: &str) -> Result<Self> {
        match raw {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(Error::contract(format!(
                "{key}: expected true or false, got '{raw}'"
            ))),
        }
    }
}

impl RunConfig {
    /// Canonical text form: every key, fixed order, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($cfg:expr, $field:ident) => {
                writeln!(out, "{} = {}", stringify!($field), $cfg.$field.render()).unwrap();
            };
        }
        config_keys!(emit, self);
        out
    }

    /// Parses config text, starting from defaults; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(pos) => &line[..pos],
                None => line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| {
                Error::parse(
                    format!("config line {}", lineno + 1),
                    format!("expected 'key = value', got '{line}'"),
                )
            })?;
            let key = key.trim();
            let raw = raw.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::contract(format!("{key}: duplicate config key")));
            }
            let mut matched = false;
            macro_rules! assign {
                ($cfg:expr, $field:ident) => {
                    if key == stringify!($field) {
                        $cfg.$field = ConfigValue::parse_value(key, raw)?;
                        matched = true;
                    }
                };
            }
            config_keys!(assign, cfg);
            if !matched {
                return Err(Error::contract(format!("{key}: unknown config key")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }

    /// Cross-field sanity checks; violations name the offending key.
    pub fn validate(&self) -> Result<()> {
        fn positive(key: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(Error::contract(format!("{key}: must be positive")));
            }
            Ok(())
        }
        positive("channels", self.channels)?;
        positive("bottleneck", self.bottleneck)?;
        positive("embed_dim", self.embed_dim)?;
        positive("audio_track_len", self.audio_track_len)?;
        positive("visual_track_len", self.visual_track_len)?;
        positive("audio_in_dim", self.audio_in_dim)?;
        positive("batch_size", self.batch_size)?;
        positive("top_k", self.top_k)?;
        positive("audio_frames", self.audio_frames)?;
        positive("visual_frames", self.visual_frames)?;
        positive("utts_per_identity", self.utts_per_identity)?;
        if self.visual_size < 8 {
            return Err(Error::contract(
                "visual_size: must be at least 8 (two strided 3x3 convolutions)",
            ));
        }
        if self.n_identities < 2 {
            return Err(Error::contract("n_identities: must be at least 2"));
        }
        if self.train_utts_per_identity == 0 || self.train_utts_per_identity > self.utts_per_identity
        {
            return Err(Error::contract(
                "train_utts_per_identity: must be in 1..=utts_per_identity",
            ));
        }
        if !(self.margin >= 0.0 && self.margin < std::f64::consts::PI) {
            return Err(Error::contract("margin: must lie in [0, pi)"));
        }
        if self.scale <= 0.0 {
            return Err(Error::contract("scale: must be positive"));
        }
        if !(0.0..=1.0).contains(&self.keyframe_overlap) {
            return Err(Error::contract("keyframe_overlap: must lie in [0, 1]"));
        }
        if !(self.keyframe_frac > 0.0 && self.keyframe_frac <= 1.0) {
            return Err(Error::contract("keyframe_frac: must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.p_target) || self.p_target <= 0.0 {
            return Err(Error::contract("p_target: must lie in (0, 1)"));
        }
        if self.c_miss <= 0.0 || self.c_fa <= 0.0 {
            return Err(Error::contract("c_miss, c_fa: must be positive"));
        }
        if self.lr <= 0.0 {
            return Err(Error::contract("lr: must be positive"));
        }
        if self.lr_halve_every == 0 {
            return Err(Error::contract("lr_halve_every: must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::contract("weight_decay: must be non-negative"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::contract("noise_sigma: must be non-negative"));
        }
        if self.proto_margin <= 0.0 {
            return Err(Error::contract("proto_margin: must be positive"));
        }
        Ok(())
    }
}
