//! Plain-text run configuration: one `key=value` per line, `#` comments,
//! unknown keys rejected. Every CLI run writes the fully-resolved config
//! (defaults included) next to its outputs so any artifact can be
//! reproduced from its directory alone.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::objective::{L1Mode, LossConfig};
use crate::phantom::PhantomSpec;
use crate::relevance::{PaintMode, RelevanceConfig};

/// Environment variable that overrides the `seed` key when set.
pub const SEED_ENV: &str = "RELEVANCE_FORGE_SEED";

/// Name of the resolved-config snapshot written next to run outputs.
pub const RESOLVED_FILENAME: &str = "resolved.cfg";

/// All settings of every pipeline stage, with paper-derived defaults.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub phantom_count: usize,
    pub phantom_dim: usize,
    pub phantom_channels: usize,
    pub phantom_class_ratio: f64,
    pub phantom_blob_radius_min: f64,
    pub phantom_blob_radius_max: f64,
    pub phantom_texture_contrast: f64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub classifier_widths: Vec<usize>,
    pub classifier_lr: f64,
    pub classifier_epochs: u32,
    pub classifier_batch: usize,
    pub generator_enc_widths: (usize, usize),
    pub generator_bottleneck: usize,
    pub generator_lr: f64,
    pub generator_epochs: u32,
    pub generator_batch: usize,
    pub loss: LossConfig,
    pub relevance: RelevanceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            phantom_count: 200,
            phantom_dim: 32,
            phantom_channels: 2,
            phantom_class_ratio: 0.6,
            phantom_blob_radius_min: 5.0,
            phantom_blob_radius_max: 8.0,
            phantom_texture_contrast: 0.25,
            split_train: 0.6,
            split_val: 0.2,
            split_test: 0.2,
            classifier_widths: vec![6, 12, 24],
            classifier_lr: 0.01,
            classifier_epochs: 100,
            classifier_batch: 4,
            generator_enc_widths: (6, 12),
            generator_bottleneck: 5,
            generator_lr: 0.1,
            generator_epochs: 200,
            generator_batch: 4,
            loss: LossConfig::default(),
            relevance: RelevanceConfig::default(),
        }
    }
}

/// Every key, in the canonical order used by the resolved snapshot.
pub const KEYS: &[&str] = &[
    "seed",
    "phantom.count",
    "phantom.dim",
    "phantom.channels",
    "phantom.class_ratio",
    "phantom.blob_radius_min",
    "phantom.blob_radius_max",
    "phantom.texture_contrast",
    "split.train",
    "split.val",
    "split.test",
    "classifier.widths",
    "classifier.lr",
    "classifier.epochs",
    "classifier.batch",
    "generator.enc_widths",
    "generator.bottleneck",
    "generator.lr",
    "generator.epochs",
    "generator.batch",
    "loss.alpha",
    "loss.beta",
    "loss.delta",
    "loss.epsilon_gap",
    "loss.l1_mode",
    "loss.w_perturbation",
    "loss.w_l1",
    "loss.w_indecisive",
    "slic.k",
    "slic.m",
    "slic.max_iters",
    "slic.min_size_fraction",
    "relevance.bins",
    "relevance.low_mask_is_relevant",
    "relevance.paint",
];

fn parse_as<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key} expects {kind}, got {value:?}")))
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|p| parse_as(key, p.trim(), "a comma-separated list of integers"))
        .collect()
}

impl RunConfig {
    /// Apply one key=value pair. Unknown keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_as(key, value, "an unsigned integer")?,
            "phantom.count" => self.phantom_count = parse_as(key, value, "an integer")?,
            "phantom.dim" => self.phantom_dim = parse_as(key, value, "an integer")?,
            "phantom.channels" => self.phantom_channels = parse_as(key, value, "an integer")?,
            "phantom.class_ratio" => {
                self.phantom_class_ratio = parse_as(key, value, "a real number")?
            }
            "phantom.blob_radius_min" => {
                self.phantom_blob_radius_min = parse_as(key, value, "a real number")?
            }
            "phantom.blob_radius_max" => {
                self.phantom_blob_radius_max = parse_as(key, value, "a real number")?
            }
            "phantom.texture_contrast" => {
                self.phantom_texture_contrast = parse_as(key, value, "a real number")?
            }
            "split.train" => self.split_train = parse_as(key, value, "a real number")?,
            "split.val" => self.split_val = parse_as(key, value, "a real number")?,
            "split.test" => self.split_test = parse_as(key, value, "a real number")?,
            "classifier.widths" => {
                let widths = parse_usize_list(key, value)?;
                if widths.len() < 2 {
                    return Err(Error::Config(format!(
                        "{key} needs at least two stages, got {value:?}"
                    )));
                }
                self.classifier_widths = widths;
            }
            "classifier.lr" => self.classifier_lr = parse_as(key, value, "a real number")?,
            "classifier.epochs" => self.classifier_epochs = parse_as(key, value, "an integer")?,
            "classifier.batch" => self.classifier_batch = parse_as(key, value, "an integer")?,
            "generator.enc_widths" => {
                let widths = parse_usize_list(key, value)?;
                if widths.len() != 2 {
                    return Err(Error::Config(format!(
                        "{key} expects exactly two stages, got {value:?}"
                    )));
                }
                self.generator_enc_widths = (widths[0], widths[1]);
            }
            "generator.bottleneck" => {
                self.generator_bottleneck = parse_as(key, value, "an integer")?
            }
            "generator.lr" => self.generator_lr = parse_as(key, value, "a real number")?,
            "generator.epochs" => self.generator_epochs = parse_as(key, value, "an integer")?,
            "generator.batch" => self.generator_batch = parse_as(key, value, "an integer")?,
            "loss.alpha" => self.loss.alpha = parse_as(key, value, "a real number")?,
            "loss.beta" => self.loss.beta = parse_as(key, value, "a real number")?,
            "loss.delta" => self.loss.delta = parse_as(key, value, "a real number")?,
            "loss.epsilon_gap" => self.loss.epsilon_gap = parse_as(key, value, "a real number")?,
            "loss.l1_mode" => self.loss.l1_mode = L1Mode::parse(value)?,
            "loss.w_perturbation" => {
                self.loss.w_perturbation = parse_as(key, value, "a real number")?
            }
            "loss.w_l1" => self.loss.w_l1 = parse_as(key, value, "a real number")?,
            "loss.w_indecisive" => self.loss.w_indecisive = parse_as(key, value, "a real number")?,
            "slic.k" => self.relevance.slic.k = parse_as(key, value, "an integer")?,
            "slic.m" => self.relevance.slic.m = parse_as(key, value, "a real number")?,
            "slic.max_iters" => self.relevance.slic.max_iters = parse_as(key, value, "an integer")?,
            "slic.min_size_fraction" => {
                self.relevance.slic.min_size_fraction = parse_as(key, value, "a real number")?
            }
            "relevance.bins" => self.relevance.bins = parse_as(key, value, "an integer")?,
            "relevance.low_mask_is_relevant" => {
                self.relevance.low_mask_is_relevant =
                    parse_as(key, value, "\"true\" or \"false\"")?
            }
            "relevance.paint" => self.relevance.paint = PaintMode::parse(value)?,
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Parse config text: `key=value` lines, `#` comments, blank lines.
    /// Later assignments to the same key are rejected as duplicates.
    pub fn parse_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got {line:?}",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            if let Some(&dup) = seen.iter().find(|&&k| k == key) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {dup:?}",
                    lineno + 1
                )));
            }
            cfg.apply(key, value)?;
            seen.push(KEYS.iter().find(|&&k| k == key).expect("applied key is known"));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse_text(&text)
    }

    /// Replace the seed from `RELEVANCE_FORGE_SEED` when the variable is set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                self.seed = v.parse().map_err(|_| {
                    Error::Config(format!("{SEED_ENV} expects an unsigned integer, got {v:?}"))
                })?;
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(std::env::VarError::NotUnicode(_)) => Err(Error::Config(format!(
                "{SEED_ENV} is not valid unicode"
            ))),
        }
    }

    fn value_of(&self, key: &str) -> String {
        let list =
            |xs: &[usize]| xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        match key {
            "seed" => self.seed.to_string(),
            "phantom.count" => self.phantom_count.to_string(),
            "phantom.dim" => self.phantom_dim.to_string(),
            "phantom.channels" => self.phantom_channels.to_string(),
            "phantom.class_ratio" => self.phantom_class_ratio.to_string(),
            "phantom.blob_radius_min" => self.phantom_blob_radius_min.to_string(),
            "phantom.blob_radius_max" => self.phantom_blob_radius_max.to_string(),
            "phantom.texture_contrast" => self.phantom_texture_contrast.to_string(),
            "split.train" => self.split_train.to_string(),
            "split.val" => self.split_val.to_string(),
            "split.test" => self.split_test.to_string(),
            "classifier.widths" => list(&self.classifier_widths),
            "classifier.lr" => self.classifier_lr.to_string(),
            "classifier.epochs" => self.classifier_epochs.to_string(),
            "classifier.batch" => self.classifier_batch.to_string(),
            "generator.enc_widths" => {
                list(&[self.generator_enc_widths.0, self.generator_enc_widths.1])
            }
            "generator.bottleneck" => self.generator_bottleneck.to_string(),
            "generator.lr" => self.generator_lr.to_string(),
            "generator.epochs" => self.generator_epochs.to_string(),
            "generator.batch" => self.generator_batch.to_string(),
            "loss.alpha" => self.loss.alpha.to_string(),
            "loss.beta" => self.loss.beta.to_string(),
            "loss.delta" => self.loss.delta.to_string(),
            "loss.epsilon_gap" => self.loss.epsilon_gap.to_string(),
            "loss.l1_mode" => self.loss.l1_mode.as_str().to_string(),
            "loss.w_perturbation" => self.loss.w_perturbation.to_string(),
            "loss.w_l1" => self.loss.w_l1.to_string(),
            "loss.w_indecisive" => self.loss.w_indecisive.to_string(),
            "slic.k" => self.relevance.slic.k.to_string(),
            "slic.m" => self.relevance.slic.m.to_string(),
            "slic.max_iters" => self.relevance.slic.max_iters.to_string(),
            "slic.min_size_fraction" => self.relevance.slic.min_size_fraction.to_string(),
            "relevance.bins" => self.relevance.bins.to_string(),
            "relevance.low_mask_is_relevant" => self.relevance.low_mask_is_relevant.to_string(),
            "relevance.paint" => self.relevance.paint.as_str().to_string(),
            other => unreachable!("value_of called with unknown key {other}"),
        }
    }

    /// Full key=value snapshot, every key present, canonical order.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.value_of(key));
        }
        out
    }

    /// Write the resolved snapshot into `dir` as `resolved.cfg`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_FILENAME);
        fs::write(&path, self.resolved()).map_err(|e| Error::io(&path, e))
    }

    /// The phantom spec this config describes, seeded with the run seed.
    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            seed: self.seed,
            count: self.phantom_count,
            dims: (self.phantom_dim, self.phantom_dim, self.phantom_dim),
            channels: self.phantom_channels,
            class_ratio: self.phantom_class_ratio,
            blob_radius_range: (self.phantom_blob_radius_min, self.phantom_blob_radius_max),
            texture_contrast: self.phantom_texture_contrast,
        }
    }

    pub fn split_fractions(&self) -> (f64, f64, f64) {
        (self.split_train, self.split_val, self.split_test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_resolved_text() {
        let cfg = RunConfig::default();
        let text = cfg.resolved();
        let back = RunConfig::parse_text(&text).unwrap();
        assert_eq!(back.resolved(), text);
        // Every registry key appears exactly once.
        for key in KEYS {
            assert_eq!(
                text.lines().filter(|l| l.starts_with(&format!("{key}="))).count(),
                1,
                "{key}"
            );
        }
    }

    #[test]
    fn parses_comments_overrides_and_rejects_unknowns() {
        let cfg = RunConfig::parse_text(
            "# pipeline overrides\nseed = 7\nslic.k=16   # fewer regions\n\nloss.l1_mode=item-sum\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.relevance.slic.k, 16);
        assert_eq!(cfg.loss.l1_mode, L1Mode::ItemSum);
        assert_eq!(cfg.phantom_count, 200); // untouched default

        assert!(matches!(
            RunConfig::parse_text("phantom.size=10\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse_text("seed=1\nseed=2\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse_text("just a line\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse_text("seed=notanumber\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse_text("generator.enc_widths=1,2,3\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn env_seed_override() {
        // Deliberately serialized: env vars are process-global.
        let mut cfg = RunConfig::default();
        std::env::set_var(SEED_ENV, "123");
        cfg.apply_env_seed().unwrap();
        assert_eq!(cfg.seed, 123);
        std::env::set_var(SEED_ENV, "not-a-seed");
        assert!(matches!(cfg.apply_env_seed(), Err(Error::Config(_))));
        std::env::remove_var(SEED_ENV);
        cfg.apply_env_seed().unwrap();
        assert_eq!(cfg.seed, 123); // untouched when unset
    }
}
