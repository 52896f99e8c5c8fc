//! Training configuration: a flat `key = value` file with documented keys.
//!
//! | key | default |
//! |---|---|
//! | `w1` `w2` `w3` `w4` | 0.5, 0.2, 0.05, 0.2 |
//! | `ema_decay` | 0.999 |
//! | `batch_labeled`, `batch_unlabeled` | 8, 8 |
//! | `iterations_per_round` | 40000 |
//! | `rounds` | 4 |
//! | `assessment_interval` | 1, or `"never"` |
//! | `temperature` | 1.0 |
//! | `seed` | 0 (overridden by `STORMLAB_SEED`) |
//! | `learning_rate` | 2e-4 |
//! | `checkpoint_interval` | 1000 |
//! | `n_ctx` | 8 |
//! | `prompt_epochs`, `prompt_lr` | 50, 0.002 |
//! | `rating_template` | see [`DEFAULT_RATING_TEMPLATE`] |
//! | `assessment_retries` | 2 |
//! | `overlap_threshold`, `description_retries` | 0.3, 2 |
//! | `vlm_updates`, `candidate_init`, `round_refresh` | true |
//!
//! The last three switch off parts of the pipeline for ablations:
//! `vlm_updates = false` makes every teacher prediction replace the stored
//! label, `candidate_init = false` starts every label from the degraded input,
//! and `round_refresh = false` skips prompt retraining and description refresh
//! at round boundaries.

use std::fmt::Write as _;
use std::path::Path;

use crate::backends::{render_rating_prompt, DEFAULT_RATING_TEMPLATE};
use crate::error::{Error, Result};
use crate::objectives::LossWeights;

pub const SEED_ENV: &str = "STORMLAB_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssessmentInterval {
    Every(u64),
    Never,
}

impl AssessmentInterval {
    pub fn is_due(self, iteration: u64) -> bool {
        match self {
            AssessmentInterval::Every(n) => iteration.is_multiple_of(n),
            AssessmentInterval::Never => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss_weights: LossWeights,
    pub ema_decay: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub iterations_per_round: u64,
    pub rounds: u32,
    pub assessment_interval: AssessmentInterval,
    pub temperature: f64,
    pub seed: u64,
    pub learning_rate: f64,
    pub checkpoint_interval: u64,
    pub n_ctx: usize,
    pub prompt_epochs: usize,
    pub prompt_lr: f64,
    pub rating_template: String,
    pub assessment_retries: usize,
    pub overlap_threshold: f64,
    pub description_retries: usize,
    pub vlm_updates: bool,
    pub candidate_init: bool,
    pub round_refresh: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_weights: LossWeights::default(),
            ema_decay: 0.999,
            batch_labeled: 8,
            batch_unlabeled: 8,
            iterations_per_round: 40_000,
            rounds: 4,
            assessment_interval: AssessmentInterval::Every(1),
            temperature: 1.0,
            seed: 0,
            learning_rate: 2e-4,
            checkpoint_interval: 1000,
            n_ctx: 8,
            prompt_epochs: 50,
            prompt_lr: 0.002,
            rating_template: DEFAULT_RATING_TEMPLATE.to_string(),
            assessment_retries: 2,
            overlap_threshold: 0.3,
            description_retries: 2,
            vlm_updates: true,
            candidate_init: true,
            round_refresh: true,
        }
    }
}

fn get_f64(v: &toml::Value, key: &str) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::config(key, format!("expected a number, got {v}"))),
    }
}

fn get_u64(v: &toml::Value, key: &str) -> Result<u64> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(Error::config(key, format!("expected a non-negative integer, got {v}"))),
    }
}

/// Seeds above the TOML integer range are written as quoted decimals.
fn get_seed(v: &toml::Value) -> Result<u64> {
    match v {
        toml::Value::String(s) => s
            .parse()
            .map_err(|_| Error::config("seed", format!("expected an unsigned integer, got {v}"))),
        _ => get_u64(v, "seed"),
    }
}

fn get_bool(v: &toml::Value, key: &str) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::config(key, format!("expected true or false, got {v}")))
}

fn get_string(v: &toml::Value, key: &str) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::config(key, format!("expected a quoted string, got {v}")))
}

fn small<T: TryFrom<u64>>(n: u64, key: &str) -> Result<T> {
    T::try_from(n).map_err(|_| Error::config(key, format!("{n} is out of range")))
}

impl TrainConfig {
    /// Parses config text, filling unspecified keys with defaults, then validates.
    pub fn from_str_checked(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let key = e
                .span()
                .and_then(|s| text.get(..s.start))
                .and_then(|before| before.lines().last())
                .and_then(|line| line.split('=').next())
                .map(|k| k.trim().to_string())
                .filter(|k| !k.is_empty())
                .unwrap_or_else(|| "<file>".to_string());
            Error::config(key, e.message().to_string())
        })?;
        let mut c = TrainConfig::default();
        for (key, v) in &table {
            let k = key.as_str();
            match k {
                "w1" => c.loss_weights.w1 = get_f64(v, k)?,
                "w2" => c.loss_weights.w2 = get_f64(v, k)?,
                "w3" => c.loss_weights.w3 = get_f64(v, k)?,
                "w4" => c.loss_weights.w4 = get_f64(v, k)?,
                "ema_decay" => c.ema_decay = get_f64(v, k)?,
                "batch_labeled" => c.batch_labeled = small(get_u64(v, k)?, k)?,
                "batch_unlabeled" => c.batch_unlabeled = small(get_u64(v, k)?, k)?,
                "iterations_per_round" => c.iterations_per_round = get_u64(v, k)?,
                "rounds" => c.rounds = small(get_u64(v, k)?, k)?,
                "assessment_interval" => {
                    c.assessment_interval = match v {
                        toml::Value::String(s) if s == "never" => AssessmentInterval::Never,
                        _ => AssessmentInterval::Every(get_u64(v, k).map_err(|_| {
                            Error::config(k, format!("expected a positive integer or \"never\", got {v}"))
                        })?),
                    }
                }
                "temperature" => c.temperature = get_f64(v, k)?,
                "seed" => c.seed = get_seed(v)?,
                "learning_rate" => c.learning_rate = get_f64(v, k)?,
                "checkpoint_interval" => c.checkpoint_interval = get_u64(v, k)?,
                "n_ctx" => c.n_ctx = small(get_u64(v, k)?, k)?,
                "prompt_epochs" => c.prompt_epochs = small(get_u64(v, k)?, k)?,
                "prompt_lr" => c.prompt_lr = get_f64(v, k)?,
                "rating_template" => c.rating_template = get_string(v, k)?,
                "assessment_retries" => c.assessment_retries = small(get_u64(v, k)?, k)?,
                "overlap_threshold" => c.overlap_threshold = get_f64(v, k)?,
                "description_retries" => c.description_retries = small(get_u64(v, k)?, k)?,
                "vlm_updates" => c.vlm_updates = get_bool(v, k)?,
                "candidate_init" => c.candidate_init = get_bool(v, k)?,
                "round_refresh" => c.round_refresh = get_bool(v, k)?,
                _ => return Err(Error::config(k, "unknown key")),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        let invalid = |key: &str, msg: &str| Err(Error::Validation(format!("{key}: {msg}")));
        if !(0.0..1.0).contains(&self.ema_decay) {
            return invalid("ema_decay", "must lie in [0, 1)");
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return invalid("batch_labeled/batch_unlabeled", "must be >= 1");
        }
        if self.iterations_per_round == 0 {
            return invalid("iterations_per_round", "must be >= 1");
        }
        if self.rounds == 0 {
            return invalid("rounds", "must be >= 1");
        }
        if self.assessment_interval == AssessmentInterval::Every(0) {
            return invalid("assessment_interval", "must be >= 1 or \"never\"");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return invalid("temperature", "must be a positive number");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return invalid("learning_rate", "must be a positive number");
        }
        if self.checkpoint_interval == 0 {
            return invalid("checkpoint_interval", "must be >= 1");
        }
        if self.n_ctx == 0 {
            return invalid("n_ctx", "must be >= 1");
        }
        if !(self.prompt_lr.is_finite() && self.prompt_lr > 0.0) {
            return invalid("prompt_lr", "must be a positive number");
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) {
            return invalid("overlap_threshold", "must lie in [0, 1]");
        }
        render_rating_prompt(&self.rating_template)
            .map_err(|e| Error::Validation(format!("rating_template: {e}")))?;
        Ok(())
    }

    /// Serializes every key, so the output loads back to an equal config.
    pub fn to_config_string(&self) -> String {
        let w = &self.loss_weights;
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line("w1", format!("{:?}", w.w1));
        line("w2", format!("{:?}", w.w2));
        line("w3", format!("{:?}", w.w3));
        line("w4", format!("{:?}", w.w4));
        line("ema_decay", format!("{:?}", self.ema_decay));
        line("batch_labeled", self.batch_labeled.to_string());
        line("batch_unlabeled", self.batch_unlabeled.to_string());
        line("iterations_per_round", self.iterations_per_round.to_string());
        line("rounds", self.rounds.to_string());
        line(
            "assessment_interval",
            match self.assessment_interval {
                AssessmentInterval::Every(n) => n.to_string(),
                AssessmentInterval::Never => "\"never\"".to_string(),
            },
        );
        line("temperature", format!("{:?}", self.temperature));
        line(
            "seed",
            if i64::try_from(self.seed).is_ok() {
                self.seed.to_string()
            } else {
                format!("\"{}\"", self.seed)
            },
        );
        line("learning_rate", format!("{:?}", self.learning_rate));
        line("checkpoint_interval", self.checkpoint_interval.to_string());
        line("n_ctx", self.n_ctx.to_string());
        line("prompt_epochs", self.prompt_epochs.to_string());
        line("prompt_lr", format!("{:?}", self.prompt_lr));
        line("rating_template", toml::Value::String(self.rating_template.clone()).to_string());
        line("assessment_retries", self.assessment_retries.to_string());
        line("overlap_threshold", format!("{:?}", self.overlap_threshold));
        line("description_retries", self.description_retries.to_string());
        line("vlm_updates", self.vlm_updates.to_string());
        line("candidate_init", self.candidate_init.to_string());
        line("round_refresh", self.round_refresh.to_string());
        out
    }

    /// Applies a `STORMLAB_SEED`-style override value.
    pub fn with_seed_override(mut self, value: Option<&str>) -> Result<Self> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("expected a non-negative integer, got `{v}`")))?;
        }
        Ok(self)
    }
}

/// Loads and validates a config file, then applies the `STORMLAB_SEED` override.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
    TrainConfig::from_str_checked(&text)?.with_seed_override(std::env::var(SEED_ENV).ok().as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = TrainConfig::from_str_checked("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.rounds, 4);
        assert_eq!(c.iterations_per_round, 40_000);
        assert_eq!((c.batch_labeled, c.batch_unlabeled), (8, 8));
    }

    #[test]
    fn single_weight_keeps_other_defaults() {
        let c = TrainConfig::from_str_checked("w1 = 0.5\n").unwrap();
        assert_eq!(c.loss_weights, LossWeights { w1: 0.5, w2: 0.2, w3: 0.05, w4: 0.2 });
    }

    #[test]
    fn zero_rounds_is_rejected() {
        assert!(matches!(TrainConfig::from_str_checked("rounds = 0"), Err(Error::Validation(_))));
    }

    #[test]
    fn errors_name_the_key() {
        match TrainConfig::from_str_checked("roudns = 3") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "roudns"),
            other => panic!("unexpected {other:?}"),
        }
        match TrainConfig::from_str_checked("w2 = \"high\"") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "w2"),
            other => panic!("unexpected {other:?}"),
        }
        match TrainConfig::from_str_checked("seed = 1\nema_decay = = 3") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "ema_decay"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn interval_accepts_never() {
        let c = TrainConfig::from_str_checked("assessment_interval = \"never\"").unwrap();
        assert_eq!(c.assessment_interval, AssessmentInterval::Never);
        assert!(!c.assessment_interval.is_due(0));
        assert!(TrainConfig::from_str_checked("assessment_interval = 0").is_err());
    }

    #[test]
    fn seed_override() {
        let c = TrainConfig::default().with_seed_override(Some("42")).unwrap();
        assert_eq!(c.seed, 42);
        assert!(TrainConfig::default().with_seed_override(Some("x")).is_err());
    }

    #[test]
    fn template_needs_placeholder() {
        assert!(TrainConfig::from_str_checked("rating_template = \"rate it\"").is_err());
    }
}
