//! Run configuration.
//!
//! One flat set of `key=value` settings covers every stage. Files use the
//! same syntax as command-line overrides; `#` starts a comment line. All
//! randomness comes from `seed`: each stage draws its own seed with
//! [`derive_seed`] on the stage name, so changing one stage never shifts
//! another's stream.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use crate::datagen::CorpusConfig;
use crate::encoder::{EncoderConfig, Modality};
use crate::error::{Error, Result};
use crate::healing::HealConfig;
use crate::numerics::derive_seed;
use crate::predictor::PredictorConfig;
use crate::retrieval::QueryOptions;
use crate::scheduler::PipelineOptions;
use crate::store::{Encoding, StoreOptions};

/// Non-comment lines of a `key=value` file as `(line, key, value)`.
/// Keys may appear only once.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse { line: i + 1, msg: format!("expected key=value, found {line:?}") });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: "empty key".into() });
        }
        if !seen.insert(k.to_string()) {
            return Err(Error::Parse { line: i + 1, msg: format!("duplicate key {k:?}") });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn show(&self) -> String {
                format!("{self:?}")
            }
        }
    )*};
}

plain_value!(u64, usize, f32, f64);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "on" | "true" => Ok(true),
            "off" | "false" => Ok(false),
            _ => Err(format!("expected on or off, found {s:?}")),
        }
    }
    fn show(&self) -> String {
        if *self { "on" } else { "off" }.into()
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn show(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Modality {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Encoding {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

macro_rules! run_config {
    ($($(#[$doc:meta])* $field:ident: $ty:ty = $default:expr,)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[$doc])* pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = ConfigValue::parse_value(value)
                            .map_err(|e| Error::invalid(format!("{key}: {e}")))?;
                    })*
                    _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            /// Every setting as `key=value` lines in a fixed order. Parsing
            /// the echo gives back the same configuration.
            pub fn echo(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{}={}", stringify!($field), self.$field.show());)*
                out
            }
        }
    };
}

run_config! {
    /// Root of every stage seed.
    seed: u64 = 42,
    num_layers: usize = 12,
    d_model: usize = 64,
    unified_dim: usize = 32,
    input_dim: usize = 32,
    lora_rank: usize = 4,
    lora_alpha: f32 = 8.0,
    encoder_modality_gap: f32 = 0.05,
    corpus_size: usize = 200,
    d_latent: usize = 16,
    noise_low: f32 = 0.0,
    noise_high: f32 = 1.0,
    corpus_modality_gap: f32 = 0.3,
    clutter_rank: usize = 2,
    clutter_gain: f32 = 3.0,
    /// Modality items are stored in; queries use the other one.
    item_modality: Modality = Modality::A,
    query_modality: Modality = Modality::B,
    superficial_n: usize = 3,
    predictor_hidden: usize = 16,
    predictor_epochs: usize = 200,
    predictor_lr: f32 = 0.3,
    heal_epochs: usize = 50,
    heal_lr: f32 = 1e-2,
    heal_min_pool: usize = 8,
    heal_loss_tolerance: f32 = 1e-4,
    max_batch: usize = 32,
    pipeline: bool = true,
    inject_load_ms: f64 = 0.0,
    inject_compute_ms: f64 = 0.0,
    quantize_superficial: bool = false,
    embedding_encoding: Encoding = Encoding::F32,
    cache_encoding: Encoding = Encoding::Int4,
    k1: usize = 10,
    k2: usize = 10,
    /// Number of queries issued by `query`/`eval`; 0 queries every item.
    query_count: usize = 0,
    /// Trace CSV for `simulate`; empty uses a synthetic Poisson trace.
    trace: String = String::new(),
    trace_items: usize = 500,
    trace_rate: f64 = 1.0,
    /// Simulation horizon in seconds; 0 uses the trace span.
    horizon_s: f64 = 0.0,
    /// Device profile file for `simulate`; empty uses the built-in one.
    profile: String = String::new(),
    /// Exit of the fixed-exit baseline; 0 rounds the mean labeled exit.
    fixed_exit: usize = 0,
}

impl RunConfig {
    /// Applies a `key=value` file on top of the current settings.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line, key, value) in parse_key_values(text)? {
            self.set(&key, &value).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            d_model: self.d_model,
            unified_dim: self.unified_dim,
            input_dim: self.input_dim,
            seed: self.stage_seed("encoder"),
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            modality_gap: self.encoder_modality_gap,
            ..EncoderConfig::default()
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            n: self.corpus_size,
            d_latent: self.d_latent,
            input_dim: self.input_dim,
            noise_low: self.noise_low,
            noise_high: self.noise_high,
            modality_gap: self.corpus_modality_gap,
            clutter_rank: self.clutter_rank,
            clutter_gain: self.clutter_gain,
            seed: self.stage_seed("corpus"),
        }
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        PredictorConfig {
            superficial_n: self.superficial_n,
            hidden: self.predictor_hidden,
            epochs: self.predictor_epochs,
            learning_rate: self.predictor_lr,
            seed: self.stage_seed("predictor"),
        }
    }

    pub fn heal_config(&self) -> HealConfig {
        HealConfig {
            modality: self.item_modality,
            epochs: self.heal_epochs,
            learning_rate: self.heal_lr,
            min_pool: self.heal_min_pool,
            loss_tolerance: self.heal_loss_tolerance,
        }
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        let ms = |v: f64| (v > 0.0).then(|| Duration::from_secs_f64(v / 1000.0));
        PipelineOptions {
            max_batch: self.max_batch,
            pipelined: self.pipeline,
            inject_load: ms(self.inject_load_ms),
            inject_compute: ms(self.inject_compute_ms),
            quantize_superficial: self.quantize_superficial,
        }
    }

    pub fn store_options(&self) -> StoreOptions {
        StoreOptions { embedding: self.embedding_encoding, cache: self.cache_encoding, num_layers: self.num_layers }
    }

    pub fn query_options(&self) -> QueryOptions {
        QueryOptions { k1: self.k1, k2: self.k2 }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.corpus_config().validate()?;
        if self.item_modality == self.query_modality {
            return Err(Error::invalid("item_modality and query_modality must differ"));
        }
        if self.superficial_n == 0 || self.superficial_n >= self.num_layers {
            return Err(Error::invalid(format!(
                "superficial_n {} not in [1, num_layers)",
                self.superficial_n
            )));
        }
        if self.predictor_hidden == 0 || !(self.predictor_lr.is_finite() && self.predictor_lr > 0.0) {
            return Err(Error::invalid("predictor_hidden and predictor_lr must be positive"));
        }
        if !(self.heal_lr.is_finite() && self.heal_lr > 0.0) || !self.heal_loss_tolerance.is_finite() || self.heal_loss_tolerance < 0.0 {
            return Err(Error::invalid("heal_lr must be positive and heal_loss_tolerance non-negative"));
        }
        if self.max_batch == 0 || self.k1 == 0 || self.k2 == 0 {
            return Err(Error::invalid("max_batch, k1 and k2 must be positive"));
        }
        for (k, v) in [("inject_load_ms", self.inject_load_ms), ("inject_compute_ms", self.inject_compute_ms), ("horizon_s", self.horizon_s)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{k} = {v} must be finite and non-negative")));
            }
        }
        if !(self.trace_rate.is_finite() && self.trace_rate > 0.0) {
            return Err(Error::invalid("trace_rate must be positive"));
        }
        if self.fixed_exit > self.num_layers {
            return Err(Error::invalid(format!("fixed_exit {} exceeds num_layers", self.fixed_exit)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("heal_lr", "0.003").unwrap();
        cfg.set("pipeline", "off").unwrap();
        cfg.set("query_modality", "A").unwrap();
        cfg.set("cache_encoding", "f32").unwrap();
        assert_eq!(RunConfig::from_text(&cfg.echo()).unwrap(), cfg);
        assert_eq!(cfg.echo().lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn bad_files_report_lines() {
        assert!(matches!(RunConfig::from_text("# c\nk1=5\nwarp=1\n"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(RunConfig::from_text("k1=x\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::from_text("k1=1\nk1=2\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(RunConfig::from_text("just words\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(RunConfig::from_text("=3\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn validation() {
        RunConfig::default().validate().unwrap();
        for (k, v) in [("superficial_n", "12"), ("k1", "0"), ("query_modality", "A"), ("inject_load_ms", "-1"), ("fixed_exit", "13"), ("unified_dim", "65")] {
            let mut cfg = RunConfig::default();
            cfg.set(k, v).unwrap();
            assert!(cfg.validate().is_err(), "{k}={v}");
        }
    }

    #[test]
    fn stage_seeds_are_distinct() {
        let cfg = RunConfig::default();
        assert_ne!(cfg.encoder_config().seed, cfg.corpus_config().seed);
        let other = RunConfig { seed: 43, ..RunConfig::default() };
        assert_ne!(other.encoder_config().seed, cfg.encoder_config().seed);
    }
}
