//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Every key has a default, unknown keys are rejected, and command-line
//! overrides (`key=value`) are applied after the file.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Architecture;
use crate::losses::LossWeights;
use crate::scenes::ImbalanceProfile;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: Option<String>,
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error")?;
        match (&self.line, &self.key) {
            (Some(l), Some(k)) => write!(f, " at line {l}, key `{k}`")?,
            (Some(l), None) => write!(f, " at line {l}")?,
            (None, Some(k)) => write!(f, " for key `{k}`")?,
            (None, None) => {}
        }
        write!(f, ": {}", self.msg)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Spg,
    CeOnly,
    Focal,
    WeightedCe,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Spg => "spg",
            Mode::CeOnly => "ce-only",
            Mode::Focal => "focal",
            Mode::WeightedCe => "weighted-ce",
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "spg" => Ok(Mode::Spg),
            "ce-only" => Ok(Mode::CeOnly),
            "focal" => Ok(Mode::Focal),
            "weighted-ce" => Ok(Mode::WeightedCe),
            _ => Err(format!(
                "expected spg | ce-only | focal | weighted-ce, found `{s}`"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "sgd-momentum" => Ok(OptimizerKind::SgdMomentum),
            _ => Err(format!("expected sgd | sgd-momentum, found `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl FromStr for LrSchedule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(format!("expected constant | cosine, found `{s}`")),
        }
    }
}

/// EMA smoothing factor: a literal, or `1 − 1/t` with `t` the number of
/// scenes per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Alpha {
    Fixed(f64),
    InverseIterations,
}

impl Alpha {
    pub fn resolve(self, scenes_per_epoch: usize) -> f64 {
        match self {
            Alpha::Fixed(a) => a,
            Alpha::InverseIterations => 1.0 - 1.0 / scenes_per_epoch as f64,
        }
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alpha::Fixed(a) => write!(f, "{a}"),
            Alpha::InverseIterations => write!(f, "1-1/t"),
        }
    }
}

impl FromStr for Alpha {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if compact == "1-1/t" {
            return Ok(Alpha::InverseIterations);
        }
        compact
            .parse::<f64>()
            .map(Alpha::Fixed)
            .map_err(|_| format!("expected a number or `1-1/t`, found `{s}`"))
    }
}

/// Whether feature centers in the diagnostics use raw or L2-normalized `H′`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CenterFeatures {
    Raw,
    Normalized,
}

impl FromStr for CenterFeatures {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "raw" => Ok(CenterFeatures::Raw),
            "normalized" => Ok(CenterFeatures::Normalized),
            _ => Err(format!("expected raw | normalized, found `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileName {
    Indoor13,
    Uniform(usize),
}

impl ProfileName {
    pub fn build(&self) -> ImbalanceProfile {
        match self {
            ProfileName::Indoor13 => ImbalanceProfile::default_indoor(),
            ProfileName::Uniform(c) => ImbalanceProfile::uniform(*c),
        }
    }
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfileName::Indoor13 => write!(f, "indoor13"),
            ProfileName::Uniform(c) => write!(f, "uniform{c}"),
        }
    }
}

impl FromStr for ProfileName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "indoor13" {
            return Ok(ProfileName::Indoor13);
        }
        s.strip_prefix("uniform")
            .and_then(|c| c.parse().ok())
            .filter(|&c: &usize| c >= 2)
            .map(ProfileName::Uniform)
            .ok_or_else(|| format!("expected indoor13 | uniform<C> (C >= 2), found `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub name: String,
    pub profile: ProfileName,
    pub epochs: usize,
    pub scenes_per_epoch: usize,
    pub points_per_scene: usize,
    pub test_scenes: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    /// Global gradient-norm ceilings for the main and auxiliary branches;
    /// 0 disables clipping.
    pub grad_clip_main: f64,
    pub grad_clip_aux: f64,
    pub tau: f64,
    pub alpha: Alpha,
    pub weights: LossWeights,
    pub mode: Mode,
    pub focal_gamma: f64,
    /// Epochs during which main-branch guidance stays off.
    pub guidance_warmup_epochs: usize,
    pub separate_subspaces: bool,
    pub enable_con: bool,
    pub enable_l1: bool,
    pub enable_l1_main: bool,
    pub renormalize_prototypes: bool,
    pub share_encoder: bool,
    pub center_features: CenterFeatures,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            name: "spg".into(),
            profile: ProfileName::Indoor13,
            epochs: 30,
            scenes_per_epoch: 64,
            points_per_scene: 512,
            test_scenes: 64,
            lr: 0.05,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            lr_schedule: LrSchedule::Cosine,
            grad_clip_main: 0.0,
            grad_clip_aux: 1.0,
            tau: 0.07,
            alpha: Alpha::InverseIterations,
            weights: LossWeights::default(),
            mode: Mode::Spg,
            focal_gamma: 2.0,
            guidance_warmup_epochs: 0,
            separate_subspaces: true,
            enable_con: true,
            enable_l1: true,
            enable_l1_main: true,
            renormalize_prototypes: true,
            share_encoder: false,
            center_features: CenterFeatures::Raw,
            encoder_widths: vec![32, 64],
            decoder_widths: vec![64, 32],
            projection_hidden: 64,
            projection_dim: 32,
            seed: 0,
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, found `{s}`")),
    }
}

fn parse_num<T: FromStr>(s: &str, what: &str) -> Result<T, String> {
    s.parse()
        .map_err(|_| format!("expected {what}, found `{s}`"))
}

fn parse_widths(s: &str) -> Result<Vec<usize>, String> {
    let v: Result<Vec<usize>, _> = s.split(',').map(|t| t.trim().parse::<usize>()).collect();
    match v {
        Ok(v) if !v.is_empty() && v.iter().all(|&w| w > 0) => Ok(v),
        _ => Err(format!(
            "expected comma-separated positive widths, found `{s}`"
        )),
    }
}

/// Every recognized key, in canonical order.
pub const KEYS: &[&str] = &[
    "name",
    "profile",
    "epochs",
    "scenes_per_epoch",
    "points_per_scene",
    "test_scenes",
    "lr",
    "optimizer",
    "momentum",
    "lr_schedule",
    "grad_clip_main",
    "grad_clip_aux",
    "tau",
    "alpha",
    "w1",
    "w2",
    "w3",
    "w4",
    "mode",
    "focal_gamma",
    "guidance_warmup_epochs",
    "separate_subspaces",
    "enable_con",
    "enable_l1",
    "enable_l1_main",
    "renormalize_prototypes",
    "share_encoder",
    "center_features",
    "encoder_widths",
    "decoder_widths",
    "projection_hidden",
    "projection_dim",
    "seed",
];

impl TrainConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "name" => {
                if v.is_empty() || v.contains(['/', '\\']) {
                    return Err(format!("invalid run name `{v}`"));
                }
                self.name = v.to_string();
            }
            "profile" => self.profile = v.parse()?,
            "epochs" => self.epochs = parse_num(v, "a non-negative integer")?,
            "scenes_per_epoch" => self.scenes_per_epoch = parse_num(v, "a positive integer")?,
            "points_per_scene" => self.points_per_scene = parse_num(v, "a positive integer")?,
            "test_scenes" => self.test_scenes = parse_num(v, "a positive integer")?,
            "lr" => self.lr = parse_num(v, "a number")?,
            "optimizer" => self.optimizer = v.parse()?,
            "momentum" => self.momentum = parse_num(v, "a number")?,
            "lr_schedule" => self.lr_schedule = v.parse()?,
            "grad_clip_main" => self.grad_clip_main = parse_num(v, "a number")?,
            "grad_clip_aux" => self.grad_clip_aux = parse_num(v, "a number")?,
            "tau" => self.tau = parse_num(v, "a number")?,
            "alpha" => self.alpha = v.parse()?,
            "w1" => self.weights.con = parse_num(v, "a number")?,
            "w2" => self.weights.l1 = parse_num(v, "a number")?,
            "w3" => self.weights.l1_main = parse_num(v, "a number")?,
            "w4" => self.weights.ce = parse_num(v, "a number")?,
            "mode" => self.mode = v.parse()?,
            "focal_gamma" => self.focal_gamma = parse_num(v, "a number")?,
            "guidance_warmup_epochs" => {
                self.guidance_warmup_epochs = parse_num(v, "a non-negative integer")?
            }
            "separate_subspaces" => self.separate_subspaces = parse_bool(v)?,
            "enable_con" => self.enable_con = parse_bool(v)?,
            "enable_l1" => self.enable_l1 = parse_bool(v)?,
            "enable_l1_main" => self.enable_l1_main = parse_bool(v)?,
            "renormalize_prototypes" => self.renormalize_prototypes = parse_bool(v)?,
            "share_encoder" => self.share_encoder = parse_bool(v)?,
            "center_features" => self.center_features = v.parse()?,
            "encoder_widths" => self.encoder_widths = parse_widths(v)?,
            "decoder_widths" => self.decoder_widths = parse_widths(v)?,
            "projection_hidden" => self.projection_hidden = parse_num(v, "a positive integer")?,
            "projection_dim" => self.projection_dim = parse_num(v, "a positive integer")?,
            "seed" => self.seed = parse_num(v, "an unsigned integer")?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Fully materialized `(key, value)` pairs in canonical order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .map(|&k| {
                let v = match k {
                    "name" => self.name.clone(),
                    "profile" => self.profile.to_string(),
                    "epochs" => self.epochs.to_string(),
                    "scenes_per_epoch" => self.scenes_per_epoch.to_string(),
                    "points_per_scene" => self.points_per_scene.to_string(),
                    "test_scenes" => self.test_scenes.to_string(),
                    "lr" => self.lr.to_string(),
                    "optimizer" => match self.optimizer {
                        OptimizerKind::Sgd => "sgd".into(),
                        OptimizerKind::SgdMomentum => "sgd-momentum".into(),
                    },
                    "momentum" => self.momentum.to_string(),
                    "lr_schedule" => match self.lr_schedule {
                        LrSchedule::Constant => "constant".into(),
                        LrSchedule::Cosine => "cosine".into(),
                    },
                    "grad_clip_main" => self.grad_clip_main.to_string(),
                    "grad_clip_aux" => self.grad_clip_aux.to_string(),
                    "tau" => self.tau.to_string(),
                    "alpha" => self.alpha.to_string(),
                    "w1" => self.weights.con.to_string(),
                    "w2" => self.weights.l1.to_string(),
                    "w3" => self.weights.l1_main.to_string(),
                    "w4" => self.weights.ce.to_string(),
                    "mode" => self.mode.as_str().into(),
                    "focal_gamma" => self.focal_gamma.to_string(),
                    "guidance_warmup_epochs" => self.guidance_warmup_epochs.to_string(),
                    "separate_subspaces" => self.separate_subspaces.to_string(),
                    "enable_con" => self.enable_con.to_string(),
                    "enable_l1" => self.enable_l1.to_string(),
                    "enable_l1_main" => self.enable_l1_main.to_string(),
                    "renormalize_prototypes" => self.renormalize_prototypes.to_string(),
                    "share_encoder" => self.share_encoder.to_string(),
                    "center_features" => match self.center_features {
                        CenterFeatures::Raw => "raw".into(),
                        CenterFeatures::Normalized => "normalized".into(),
                    },
                    "encoder_widths" => join(&self.encoder_widths),
                    "decoder_widths" => join(&self.decoder_widths),
                    "projection_hidden" => self.projection_hidden.to_string(),
                    "projection_dim" => self.projection_dim.to_string(),
                    "seed" => self.seed.to_string(),
                    _ => unreachable!("key list and match disagree"),
                };
                (k, v)
            })
            .collect()
    }

    /// The resolved configuration as a config file.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn resolved_alpha(&self) -> f64 {
        self.alpha.resolve(self.scenes_per_epoch)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            num_classes: self.profile.build().num_classes(),
            encoder_widths: self.encoder_widths.clone(),
            decoder_widths: self.decoder_widths.clone(),
            projection_hidden: self.projection_hidden,
            projection_dim: self.projection_dim,
        }
    }

    /// Range and consistency checks.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |key: &str, msg: String| ConfigError {
            key: Some(key.to_string()),
            line: None,
            msg,
        };
        if self.scenes_per_epoch == 0 {
            return Err(err("scenes_per_epoch", "must be at least 1".into()));
        }
        if self.points_per_scene < 2 {
            return Err(err("points_per_scene", "must be at least 2".into()));
        }
        if self.test_scenes == 0 {
            return Err(err("test_scenes", "must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(err("lr", format!("must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(err(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        for (k, v) in [
            ("grad_clip_main", self.grad_clip_main),
            ("grad_clip_aux", self.grad_clip_aux),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(err(k, format!("must be non-negative, got {v}")));
            }
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(err("tau", format!("must be positive, got {}", self.tau)));
        }
        let a = self.resolved_alpha();
        if !(0.0..1.0).contains(&a) {
            return Err(err("alpha", format!("must resolve into [0, 1), got {a}")));
        }
        for (k, w) in [
            ("w1", self.weights.con),
            ("w2", self.weights.l1),
            ("w3", self.weights.l1_main),
            ("w4", self.weights.ce),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(err(k, format!("must be non-negative, got {w}")));
            }
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(err("focal_gamma", "must be non-negative".into()));
        }
        if self.projection_hidden == 0 || self.projection_dim == 0 {
            return Err(err("projection_dim", "widths must be positive".into()));
        }
        if self.share_encoder {
            return Err(err(
                "share_encoder",
                "a shared main/auxiliary encoder is not implemented".into(),
            ));
        }
        let arch = self.architecture();
        if self.mode == Mode::Spg && arch.feature_dim() != self.projection_dim {
            return Err(err(
                "projection_dim",
                format!(
                    "prototype guidance needs the decoder output width ({}) to equal the projection width ({})",
                    arch.feature_dim(),
                    self.projection_dim
                ),
            ));
        }
        Ok(())
    }
}

/// Parses a config file's text, then applies `key=value` overrides.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<TrainConfig, ConfigError> {
    let mut cfg = TrainConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(ConfigError {
                key: None,
                line: Some(line),
                msg: format!("expected `key = value`, found `{content}`"),
            });
        };
        let k = k.trim();
        cfg.set(k, v).map_err(|msg| ConfigError {
            key: Some(k.to_string()),
            line: Some(line),
            msg,
        })?;
    }
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            return Err(ConfigError {
                key: None,
                line: None,
                msg: format!("override `{o}` is not `key=value`"),
            });
        };
        let k = k.trim();
        cfg.set(k, v).map_err(|msg| ConfigError {
            key: Some(k.to_string()),
            line: None,
            msg: format!("in override: {msg}"),
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("", &[]).unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.tau, 0.07);
        assert!((cfg.resolved_alpha() - (1.0 - 1.0 / 64.0)).abs() < 1e-15);
        assert_eq!(cfg.architecture().feature_dim(), cfg.projection_dim);
    }

    #[test]
    fn comments_and_overrides() {
        let text = "# header\n tau = 0.1  # trailing\n\nepochs=3\n";
        let cfg = parse_config(text, &["tau=0.05".into()]).unwrap();
        assert_eq!(cfg.tau, 0.05);
        assert_eq!(cfg.epochs, 3);
        assert!(cfg.to_text().contains("tau = 0.05\n"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let e = parse_config("epochs = 2\nthis line is wrong\n", &[]).unwrap_err();
        assert_eq!(e.line, Some(2));
        let e = parse_config("epochs = 2\n\nbogus = 1\n", &[]).unwrap_err();
        assert_eq!(e.line, Some(3));
        assert_eq!(e.key.as_deref(), Some("bogus"));
        let e = parse_config("epochs = two\n", &[]).unwrap_err();
        assert_eq!((e.line, e.key.as_deref()), (Some(1), Some("epochs")));
        assert!(e.to_string().contains("line 1"));
    }

    #[test]
    fn range_violations_name_the_key() {
        for (text, key) in [
            ("tau = 0", "tau"),
            ("alpha = 1.0", "alpha"),
            ("momentum = 1.2", "momentum"),
            ("w2 = -1", "w2"),
            ("share_encoder = true", "share_encoder"),
            ("projection_dim = 16", "projection_dim"),
        ] {
            let e = parse_config(text, &[]).unwrap_err();
            assert_eq!(e.key.as_deref(), Some(key), "{text}");
        }
        assert!(parse_config("", &["nokey".into()]).is_err());
    }

    #[test]
    fn alpha_forms() {
        assert_eq!("1-1/t".parse::<Alpha>().unwrap(), Alpha::InverseIterations);
        assert_eq!(
            "1 - 1/t".parse::<Alpha>().unwrap(),
            Alpha::InverseIterations
        );
        assert_eq!("0.9".parse::<Alpha>().unwrap(), Alpha::Fixed(0.9));
        assert!("x".parse::<Alpha>().is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(
            tau in 0.01f64..1.0,
            lr in 0.0f64..1.0,
            epochs in 0usize..100,
            seed in any::<u64>(),
            sep in any::<bool>(),
            mode in prop::sample::select(vec!["spg", "ce-only", "focal", "weighted-ce"]),
        ) {
            let mut cfg = TrainConfig::default();
            cfg.tau = tau;
            cfg.lr = lr;
            cfg.epochs = epochs;
            cfg.seed = seed;
            cfg.separate_subspaces = sep;
            cfg.mode = mode.parse().unwrap();
            let back = parse_config(&cfg.to_text(), &[]).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
