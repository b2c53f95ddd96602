//! Run configuration: hyperparameters for mining, DPO training and sampling.
//!
//! Configs are stored as flat `key = value` text with `#` comments. Keys are
//! dotted field paths (`m3p.alpha`, `dpo.beta`, `sampling.top_p`); unknown
//! keys are rejected. Missing keys take their defaults.
//!
//! Parameter structs (`*Params`) are plain data. The validated forms
//! (`M3PConfig`, `DpoConfig`, `SamplingConfig`, `RunConfig`) can only be
//! obtained through validation and expose the parameters read-only.

use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One invariant violation: which field, what value, what rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub value: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (got {})", self.message, self.value)
    }
}

/// Every violation found in a config, not just the first.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<Violation>);

impl ConfigErrors {
    pub fn violations(&self) -> &[Violation] {
        &self.0
    }
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Default)]
struct Checker(Vec<Violation>);

impl Checker {
    fn check(&mut self, ok: bool, field: &str, value: impl fmt::Display, rule: &str) {
        if !ok {
            self.0.push(Violation {
                field: field.to_string(),
                value: value.to_string(),
                message: format!("{field} {rule}"),
            });
        }
    }

    fn finish(self) -> std::result::Result<(), ConfigErrors> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(self.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    #[default]
    LowestIndex,
}

impl fmt::Display for TieBreak {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TieBreak::LowestIndex => f.write_str("lowest_index"),
        }
    }
}

impl FromStr for TieBreak {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "lowest_index" => Ok(TieBreak::LowestIndex),
            other => Err(format!("unknown tie_break `{other}` (expected lowest_index)")),
        }
    }
}

/// Pair-mining hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct M3PParams {
    /// Weight of the confidence penalty.
    pub alpha: f64,
    /// Log-probability margin inside which no penalty applies.
    pub delta: f64,
    pub n_candidates: i64,
    pub tie_break: TieBreak,
}

impl Default for M3PParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            delta: 0.1,
            n_candidates: 32,
            tie_break: TieBreak::LowestIndex,
        }
    }
}

impl M3PParams {
    fn check(&self, c: &mut Checker) {
        c.check(self.alpha >= 0.0 && self.alpha.is_finite(), "m3p.alpha", self.alpha, "must be ≥ 0");
        c.check(self.delta >= 0.0 && self.delta.is_finite(), "m3p.delta", self.delta, "must be ≥ 0");
        c.check(self.n_candidates >= 1, "m3p.n_candidates", self.n_candidates, "must be a positive integer");
    }

    pub fn validate(self) -> std::result::Result<M3PConfig, ConfigErrors> {
        let mut c = Checker::default();
        self.check(&mut c);
        c.finish().map(|_| M3PConfig(self))
    }
}

/// DPO training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoParams {
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: i64,
    pub warmup_fraction: f64,
    /// Zero is allowed and makes training a no-op.
    pub epochs: i64,
    pub seed: u64,
}

impl Default for DpoParams {
    fn default() -> Self {
        Self {
            beta: 0.1,
            learning_rate: 5e-5,
            batch_size: 8,
            warmup_fraction: 0.05,
            epochs: 1,
            seed: 0,
        }
    }
}

impl DpoParams {
    fn check(&self, c: &mut Checker) {
        c.check(self.beta > 0.0 && self.beta.is_finite(), "dpo.beta", self.beta, "must be > 0");
        c.check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "dpo.learning_rate",
            self.learning_rate,
            "must be > 0",
        );
        c.check(self.batch_size >= 1, "dpo.batch_size", self.batch_size, "must be a positive integer");
        c.check(
            (0.0..1.0).contains(&self.warmup_fraction),
            "dpo.warmup_fraction",
            self.warmup_fraction,
            "must be in [0,1)",
        );
        c.check(self.epochs >= 0, "dpo.epochs", self.epochs, "must be ≥ 0");
    }

    pub fn validate(self) -> std::result::Result<DpoConfig, ConfigErrors> {
        let mut c = Checker::default();
        self.check(&mut c);
        c.finish().map(|_| DpoConfig(self))
    }
}

/// Candidate decoding controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub top_p: f64,
    pub temperature: f64,
    pub max_tokens: i64,
    pub seed: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            top_p: 0.95,
            temperature: 1.0,
            max_tokens: 16,
            seed: 0,
        }
    }
}

impl SamplingParams {
    fn check(&self, c: &mut Checker) {
        c.check(self.top_p > 0.0 && self.top_p <= 1.0, "sampling.top_p", self.top_p, "must be in (0,1]");
        c.check(
            self.temperature > 0.0 && self.temperature.is_finite(),
            "sampling.temperature",
            self.temperature,
            "must be > 0",
        );
        c.check(self.max_tokens >= 1, "sampling.max_tokens", self.max_tokens, "must be a positive integer");
    }

    pub fn validate(self) -> std::result::Result<SamplingConfig, ConfigErrors> {
        let mut c = Checker::default();
        self.check(&mut c);
        c.finish().map(|_| SamplingConfig(self))
    }
}

macro_rules! validated {
    ($name:ident, $params:ty) => {
        #[derive(Debug, Clone, Copy, PartialEq)]
        pub struct $name($params);

        impl Deref for $name {
            type Target = $params;

            fn deref(&self) -> &$params {
                &self.0
            }
        }

        impl $name {
            pub fn params(&self) -> $params {
                self.0
            }
        }

        impl Default for $name {
            fn default() -> Self {
                Self(<$params>::default())
            }
        }
    };
}

validated!(M3PConfig, M3PParams);
validated!(DpoConfig, DpoParams);
validated!(SamplingConfig, SamplingParams);

impl M3PConfig {
    pub fn new(alpha: f64, delta: f64) -> Result<Self> {
        Ok(M3PParams {
            alpha,
            delta,
            ..M3PParams::default()
        }
        .validate()?)
    }

    pub fn n(&self) -> usize {
        self.n_candidates as usize
    }

    /// Stable digest of everything that affects pair selection.
    pub fn fingerprint(&self) -> String {
        digest16(&format!(
            "m3p/v1;alpha={};delta={};n_candidates={};tie_break={}",
            self.alpha, self.delta, self.n_candidates, self.tie_break
        ))
    }
}

impl DpoConfig {
    pub fn batch(&self) -> usize {
        self.batch_size as usize
    }

    pub fn n_epochs(&self) -> usize {
        self.epochs as usize
    }

    pub fn fingerprint(&self) -> String {
        digest16(&format!(
            "dpo/v1;beta={};learning_rate={};batch_size={};warmup_fraction={};epochs={};seed={}",
            self.beta, self.learning_rate, self.batch_size, self.warmup_fraction, self.epochs, self.seed
        ))
    }
}

impl SamplingConfig {
    pub fn max_new_tokens(&self) -> usize {
        self.max_tokens as usize
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self(SamplingParams { seed, ..self.0 })
    }

    pub fn fingerprint(&self) -> String {
        digest16(&format!(
            "sampling/v1;top_p={};temperature={};max_tokens={};seed={}",
            self.top_p, self.temperature, self.max_tokens, self.seed
        ))
    }
}

/// First 16 bytes of SHA-256, hex encoded.
pub(crate) fn digest16(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..16])
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunParams {
    pub m3p: M3PParams,
    pub dpo: DpoParams,
    pub sampling: SamplingParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunConfig {
    pub m3p: M3PConfig,
    pub dpo: DpoConfig,
    pub sampling: SamplingConfig,
}

/// Checks every field invariant and returns the validated config, or the
/// complete list of violations.
pub fn validate_config(params: RunParams) -> std::result::Result<RunConfig, ConfigErrors> {
    let mut c = Checker::default();
    params.m3p.check(&mut c);
    params.dpo.check(&mut c);
    params.sampling.check(&mut c);
    c.finish()?;
    Ok(RunConfig {
        m3p: M3PConfig(params.m3p),
        dpo: DpoConfig(params.dpo),
        sampling: SamplingConfig(params.sampling),
    })
}

/// One `key = value` line.
#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits flat key-value text into entries. Duplicate keys are an error.
pub fn parse_kv(text: &str, source_name: &str) -> Result<Vec<KvEntry>> {
    let mut entries: Vec<KvEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(source_name, line_no, "expected `key = value`"));
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(Error::parse(source_name, line_no, "empty key"));
        }
        if entries.iter().any(|e| e.key == key) {
            return Err(Error::parse(source_name, line_no, format!("duplicate key `{key}`")));
        }
        entries.push(KvEntry {
            key: key.to_string(),
            value: value.to_string(),
            line: line_no,
        });
    }
    Ok(entries)
}

pub(crate) fn parse_value<T: FromStr>(entry: &KvEntry, source_name: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    entry.value.parse::<T>().map_err(|e| {
        Error::parse(
            source_name,
            entry.line,
            format!("bad value `{}` for `{}`: {e}", entry.value, entry.key),
        )
    })
}

impl RunParams {
    /// Applies one entry. Returns `Ok(false)` when the key is not a run
    /// config key, so callers with a larger key space can handle it.
    pub(crate) fn apply(&mut self, entry: &KvEntry, source_name: &str) -> Result<bool> {
        let s = source_name;
        match entry.key.as_str() {
            "m3p.alpha" => self.m3p.alpha = parse_value(entry, s)?,
            "m3p.delta" => self.m3p.delta = parse_value(entry, s)?,
            "m3p.n_candidates" => self.m3p.n_candidates = parse_value(entry, s)?,
            "m3p.tie_break" => self.m3p.tie_break = parse_value(entry, s)?,
            "dpo.beta" => self.dpo.beta = parse_value(entry, s)?,
            "dpo.learning_rate" => self.dpo.learning_rate = parse_value(entry, s)?,
            "dpo.batch_size" => self.dpo.batch_size = parse_value(entry, s)?,
            "dpo.warmup_fraction" => self.dpo.warmup_fraction = parse_value(entry, s)?,
            "dpo.epochs" => self.dpo.epochs = parse_value(entry, s)?,
            "dpo.seed" => self.dpo.seed = parse_value(entry, s)?,
            "sampling.top_p" => self.sampling.top_p = parse_value(entry, s)?,
            "sampling.temperature" => self.sampling.temperature = parse_value(entry, s)?,
            "sampling.max_tokens" => self.sampling.max_tokens = parse_value(entry, s)?,
            "sampling.seed" => self.sampling.seed = parse_value(entry, s)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses config text without validating field invariants.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut params = RunParams::default();
        for entry in parse_kv(text, source_name)? {
            if !params.apply(&entry, source_name)? {
                return Err(Error::parse(source_name, entry.line, format!("unknown key `{}`", entry.key)));
            }
        }
        Ok(params)
    }

    /// Canonical text form: every key, fixed order.
    pub fn serialize(&self) -> String {
        let m = &self.m3p;
        let d = &self.dpo;
        let s = &self.sampling;
        format!(
            "m3p.alpha = {}\nm3p.delta = {}\nm3p.n_candidates = {}\nm3p.tie_break = {}\n\
             dpo.beta = {}\ndpo.learning_rate = {}\ndpo.batch_size = {}\ndpo.warmup_fraction = {}\n\
             dpo.epochs = {}\ndpo.seed = {}\n\
             sampling.top_p = {}\nsampling.temperature = {}\nsampling.max_tokens = {}\nsampling.seed = {}\n",
            m.alpha,
            m.delta,
            m.n_candidates,
            m.tie_break,
            d.beta,
            d.learning_rate,
            d.batch_size,
            d.warmup_fraction,
            d.epochs,
            d.seed,
            s.top_p,
            s.temperature,
            s.max_tokens,
            s.seed
        )
    }
}

impl RunConfig {
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        Ok(validate_config(RunParams::parse(text, source_name)?)?)
    }

    pub fn params(&self) -> RunParams {
        RunParams {
            m3p: self.m3p.params(),
            dpo: self.dpo.params(),
            sampling: self.sampling.params(),
        }
    }

    pub fn serialize(&self) -> String {
        self.params().serialize()
    }

    /// Replaces every seed in the config.
    pub fn with_seed(self, seed: u64) -> Self {
        let mut p = self.params();
        p.dpo.seed = seed;
        p.sampling.seed = seed;
        validate_config(p).expect("seed override keeps a valid config valid")
    }
}
