//! Training configuration: a flat `key = value` TOML table.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::StrongAugmentConfig;
use crate::error::{Error, Result};
use crate::loss::MaskedMean;

/// Statistics used by the aggregated branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SabStats {
    /// Learnable per-channel mix of batch and instance statistics.
    #[default]
    Mixed,
    /// Batch statistics only (mixing logit frozen at +40).
    Batch,
    /// Instance statistics only (mixing logit frozen at −40).
    Instance,
}

impl SabStats {
    pub fn frozen_logit(self) -> Option<f32> {
        match self {
            SabStats::Mixed => None,
            SabStats::Batch => Some(40.0),
            SabStats::Instance => Some(-40.0),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    #[default]
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    /// Labeled images drawn from every source domain per step.
    pub labeled_per_domain: usize,
    /// Unlabeled images drawn from every source domain per step.
    pub unlabeled_per_domain: usize,

    pub lr: f32,
    pub weight_decay: f32,
    pub alpha_lr_multiplier: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,

    /// Convert the network to domain-routed normalization. `false` trains a plain
    /// batch-normalized network as the mean-teacher baseline.
    pub siab: bool,
    pub alpha_init: f32,
    pub sab_stats: SabStats,
    pub widths: Vec<usize>,

    pub lambda_af: f32,
    pub lambda_u: f32,
    pub lambda_h: f32,
    pub lambda_r: f32,
    pub tau: f32,
    pub p_rand: f32,
    pub t_ensemble: f32,
    pub ema_momentum: f32,
    pub masked_mean: MaskedMean,

    pub aug_brightness: f32,
    pub aug_contrast: f32,
    pub aug_saturation: f32,
    pub aug_blur_min: f32,
    pub aug_blur_max: f32,
    pub aug_probability: f64,

    pub labeled_fraction: f64,
    pub split_seed: u64,
    /// Held-out domain id in the full dataset (1-based).
    pub unseen_domain: usize,
    /// Evaluate on the unseen domain every this many steps (0 = only at the end).
    pub eval_every: usize,
    pub eval_model: EvalModel,
    pub eval_batch: usize,
    /// Save checkpoints every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let aug = StrongAugmentConfig::default();
        Self {
            seed: 0,
            iterations: 300,
            labeled_per_domain: 2,
            unlabeled_per_domain: 2,
            lr: 1e-3,
            weight_decay: 0.01,
            alpha_lr_multiplier: 10.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            siab: true,
            alpha_init: 0.5,
            sab_stats: SabStats::Mixed,
            widths: vec![16, 32, 64, 128],
            lambda_af: 1.0,
            lambda_u: 1.0,
            lambda_h: 1.0,
            lambda_r: 0.2,
            tau: 0.95,
            p_rand: 0.8,
            t_ensemble: 0.5,
            ema_momentum: 0.99,
            masked_mean: MaskedMean::Total,
            aug_brightness: aug.brightness,
            aug_contrast: aug.contrast,
            aug_saturation: aug.saturation,
            aug_blur_min: aug.blur_sigma_min,
            aug_blur_max: aug.blur_sigma_max,
            aug_probability: aug.probability,
            labeled_fraction: 0.3,
            split_seed: 0,
            unseen_domain: 4,
            eval_every: 100,
            eval_model: EvalModel::Teacher,
            eval_batch: 16,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Every accepted key, sorted.
    pub fn keys() -> Vec<String> {
        match toml::Value::try_from(TrainConfig::default()) {
            Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
            _ => unreachable!("config serializes to a table"),
        }
    }

    pub fn strong_augment(&self) -> StrongAugmentConfig {
        StrongAugmentConfig {
            brightness: self.aug_brightness,
            contrast: self.aug_contrast,
            saturation: self.aug_saturation,
            blur_sigma_min: self.aug_blur_min,
            blur_sigma_max: self.aug_blur_max,
            probability: self.aug_probability,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau = {} must lie in (0, 1]", self.tau));
        }
        for (key, v) in [("p_rand", self.p_rand), ("t_ensemble", self.t_ensemble)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{key} = {v} must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return fail(format!("ema_momentum = {} must lie in [0, 1)", self.ema_momentum));
        }
        for (key, v) in [
            ("lambda_af", self.lambda_af),
            ("lambda_u", self.lambda_u),
            ("lambda_h", self.lambda_h),
            ("lambda_r", self.lambda_r),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("alpha_lr_multiplier", self.alpha_lr_multiplier),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{key} = {v} must be finite and non-negative"));
            }
        }
        if !(self.alpha_init > 0.0 && self.alpha_init < 1.0) {
            return fail(format!("alpha_init = {} must lie in (0, 1)", self.alpha_init));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return fail("adam_beta1/adam_beta2 must lie in [0, 1) and adam_eps be positive".into());
        }
        if self.labeled_per_domain == 0 {
            return fail("labeled_per_domain must be at least 1".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return fail(format!("widths {:?} must be non-empty and positive", self.widths));
        }
        if !self.siab && self.lambda_r > 0.0 {
            return fail("lambda_r > 0 needs siab = true (random affine swapping lives in converted sites)".into());
        }
        if !self.siab && self.sab_stats != SabStats::Mixed {
            return fail("sab_stats only applies when siab = true".into());
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return fail(format!("labeled_fraction = {} must lie in (0, 1]", self.labeled_fraction));
        }
        if self.unseen_domain == 0 {
            return fail("unseen_domain is 1-based".into());
        }
        if self.eval_batch == 0 {
            return fail("eval_batch must be at least 1".into());
        }
        self.strong_augment().validate()
    }

    /// Parses a flat TOML table, naming the first unknown key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let known = Self::keys();
        if let Some(k) = table.keys().find(|k| !known.contains(k)) {
            return Err(Error::UnknownConfigKey(k.clone()));
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies `key = value` overrides; values use TOML syntax, bare words are strings.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut table = match toml::Value::try_from(self) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        let known = Self::keys();
        for (key, raw) in overrides {
            let key = key.replace('-', "_");
            if !known.contains(&key) {
                return Err(Error::UnknownConfigKey(key));
            }
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            // integers are accepted where floats are expected
            let value = match (&table[&key], value) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            table.insert(key, value);
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_toml_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.lambda_h, 1.0);
        assert_eq!(cfg.lambda_r, 0.2);
        assert_eq!(cfg.tau, 0.95);
        assert_eq!(cfg.p_rand, 0.8);
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = TrainConfig::from_toml_str("lambda_r = 0.0\nsab_stats = \"batch\"\n").unwrap();
        assert_eq!(cfg.lambda_r, 0.0);
        assert_eq!(cfg.sab_stats, SabStats::Batch);
        assert_eq!(cfg.lambda_h, 1.0);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = TrainConfig::from_toml_str("lamda_h = 1.0").unwrap_err();
        assert!(matches!(&err, Error::UnknownConfigKey(k) if k == "lamda_h"), "{err}");
        let err = TrainConfig::default().with_overrides([("lambda-x", "1")]).unwrap_err();
        assert!(matches!(&err, Error::UnknownConfigKey(k) if k == "lambda_x"), "{err}");
    }

    #[test]
    fn overrides_parse_toml_values() {
        let cfg = TrainConfig::default()
            .with_overrides([
                ("lambda-r", "0"),
                ("widths", "[4, 8]"),
                ("eval_model", "student"),
                ("siab", "false"),
            ])
            .unwrap();
        assert_eq!(cfg.lambda_r, 0.0);
        assert_eq!(cfg.widths, vec![4, 8]);
        assert_eq!(cfg.eval_model, EvalModel::Student);
        assert!(!cfg.siab);
        assert!(TrainConfig::default().with_overrides([("tau", "high")]).is_err());
    }

    #[test]
    fn validation_rejects_out_of_range() {
        let bad = [
            TrainConfig { tau: 0.0, ..Default::default() },
            TrainConfig { p_rand: 1.5, ..Default::default() },
            TrainConfig { ema_momentum: 1.0, ..Default::default() },
            TrainConfig { lambda_h: -1.0, ..Default::default() },
            TrainConfig { alpha_init: 1.0, ..Default::default() },
            TrainConfig { siab: false, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        TrainConfig { tau: 1.0, p_rand: 1.0, siab: false, lambda_r: 0.0, ..Default::default() }
            .validate()
            .unwrap();
    }

    #[test]
    fn key_list_covers_every_field() {
        let keys = TrainConfig::keys();
        assert!(keys.contains(&"lambda_h".to_string()));
        assert!(keys.contains(&"aug_blur_max".to_string()));
        assert_eq!(keys.len(), TrainConfig::default().to_toml_string().lines().count());
    }
}
