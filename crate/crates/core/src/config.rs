//! Flat `key = value` configuration files and the network hyper-parameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ordered `key = value` pairs. Lines starting with `#` are comments.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            entries.insert(key.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Later values win.
    pub fn overlay(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Apply every entry to the given sections; a key that no section
    /// recognises is an error.
    pub fn apply(&self, sections: &mut [&mut dyn ConfigSection]) -> Result<()> {
        'entries: for (k, v) in &self.entries {
            for s in sections.iter_mut() {
                if s.set_key(k, v)? {
                    continue 'entries;
                }
            }
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        Ok(())
    }
}

/// A group of configuration keys.
pub trait ConfigSection {
    /// Returns `Ok(false)` when the key belongs to another section.
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool>;
    fn to_kv(&self) -> KvConfig;
}

pub fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

pub fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

pub fn join_list<V: ToString>(values: &[V]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Architecture hyper-parameters and ablation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output widths of the four encoder stages.
    pub encoder_widths: [usize; 4],
    /// Width of every convolution in the cross-reference decoder and the
    /// condition block.
    pub width: usize,
    /// Hidden width of the gating MLP is `channels / fc_reduction`.
    pub fc_reduction: usize,
    pub aspp_rates: Vec<usize>,
    pub refine_width: usize,
    /// Width of the global-convolution cache branch.
    pub cache_width: usize,
    /// One gating MLP for both branches instead of one per branch.
    pub share_fc: bool,
    pub use_cross_reference: bool,
    pub use_condition: bool,
    /// Feed the confidence cache back into the refinement block.
    pub use_cache: bool,
    /// Concatenate stage 3 and stage 4 encoder features (otherwise stage 4 only).
    pub multi_level: bool,
    /// Image-to-feature reduction, 8 or 4. At 4 the third stage is dilated
    /// instead of strided.
    pub output_stride: usize,
    /// Paint support background pixels with the dataset mean color.
    pub mask_support_input: bool,
    /// Cut gradients flowing through the cache between refinement steps.
    pub cache_stop_grad: bool,
    pub norm_mean: [f32; 3],
    pub norm_std: [f32; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_widths: [32, 64, 128, 128],
            width: 256,
            fc_reduction: 4,
            aspp_rates: vec![1, 6, 12],
            refine_width: 256,
            cache_width: 64,
            share_fc: true,
            use_cross_reference: true,
            use_condition: true,
            use_cache: true,
            multi_level: true,
            output_stride: 8,
            mask_support_input: true,
            cache_stop_grad: false,
            norm_mean: [0.5, 0.5, 0.5],
            norm_std: [0.25, 0.25, 0.25],
        }
    }
}

impl ModelConfig {
    /// Compact widths sized for single-core CPU experiments on 64x64 images.
    pub fn desk() -> Self {
        Self {
            encoder_widths: [16, 32, 48, 48],
            width: 48,
            refine_width: 48,
            cache_width: 16,
            ..Self::default()
        }
    }

    /// Channel count of the encoder output.
    pub fn feature_channels(&self) -> usize {
        if self.multi_level {
            self.encoder_widths[2] + self.encoder_widths[3]
        } else {
            self.encoder_widths[3]
        }
    }

    pub fn gate_hidden(&self) -> usize {
        (self.feature_channels() / self.fc_reduction).max(1)
    }

    /// Channel count of the refinement block input.
    pub fn refine_input_channels(&self) -> usize {
        self.width + self.feature_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.encoder_widths.contains(&0) || self.width == 0 || self.refine_width == 0 {
            return bad("widths must be positive");
        }
        if self.cache_width == 0 || self.fc_reduction == 0 {
            return bad("cache_width and fc_reduction must be positive");
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return bad("aspp_rates must be a non-empty list of positive dilations");
        }
        if self.norm_std.iter().any(|&s| s <= 0.0) {
            return bad("norm_std must be positive");
        }
        if !matches!(self.output_stride, 4 | 8) {
            return bad("output_stride must be 4 or 8");
        }
        Ok(())
    }
}

fn parse_triple(key: &str, value: &str) -> Result<[f32; 3]> {
    let v: Vec<f32> = parse_list(key, value)?;
    v.try_into().map_err(|_| Error::Config(format!("{key} needs three values")))
}

impl ConfigSection for ModelConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "encoder_widths" => {
                let v: Vec<usize> = parse_list(key, value)?;
                self.encoder_widths = v
                    .try_into()
                    .map_err(|_| Error::Config("encoder_widths needs four values".into()))?;
            }
            "width" => self.width = parse_value(key, value)?,
            "fc_reduction" => self.fc_reduction = parse_value(key, value)?,
            "aspp_rates" => self.aspp_rates = parse_list(key, value)?,
            "refine_width" => self.refine_width = parse_value(key, value)?,
            "cache_width" => self.cache_width = parse_value(key, value)?,
            "share_fc" => self.share_fc = parse_bool(key, value)?,
            "cross_reference" => self.use_cross_reference = parse_bool(key, value)?,
            "condition" => self.use_condition = parse_bool(key, value)?,
            "cache" => self.use_cache = parse_bool(key, value)?,
            "multi_level" => self.multi_level = parse_bool(key, value)?,
            "output_stride" => self.output_stride = parse_value(key, value)?,
            "mask_support_input" => self.mask_support_input = parse_bool(key, value)?,
            "cache_stop_grad" => self.cache_stop_grad = parse_bool(key, value)?,
            "norm_mean" => self.norm_mean = parse_triple(key, value)?,
            "norm_std" => self.norm_std = parse_triple(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("encoder_widths", join_list(&self.encoder_widths));
        kv.set("width", self.width.to_string());
        kv.set("fc_reduction", self.fc_reduction.to_string());
        kv.set("aspp_rates", join_list(&self.aspp_rates));
        kv.set("refine_width", self.refine_width.to_string());
        kv.set("cache_width", self.cache_width.to_string());
        kv.set("share_fc", self.share_fc.to_string());
        kv.set("cross_reference", self.use_cross_reference.to_string());
        kv.set("condition", self.use_condition.to_string());
        kv.set("cache", self.use_cache.to_string());
        kv.set("multi_level", self.multi_level.to_string());
        kv.set("output_stride", self.output_stride.to_string());
        kv.set("mask_support_input", self.mask_support_input.to_string());
        kv.set("cache_stop_grad", self.cache_stop_grad.to_string());
        kv.set("norm_mean", join_list(&self.norm_mean));
        kv.set("norm_std", join_list(&self.norm_std));
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = KvConfig::parse("# c\n width = 64\n\naspp_rates=1, 2,3\n").unwrap();
        assert_eq!(kv.get("width"), Some("64"));
        let mut m = ModelConfig::default();
        kv.apply(&mut [&mut m]).unwrap();
        assert_eq!(m.width, 64);
        assert_eq!(m.aspp_rates, vec![1, 2, 3]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let kv = KvConfig::parse("widht = 3").unwrap();
        let mut m = ModelConfig::default();
        assert!(matches!(kv.apply(&mut [&mut m]), Err(Error::Config(_))));
    }

    #[test]
    fn malformed_line_is_rejected() {
        assert!(KvConfig::parse("just words").is_err());
    }

    #[test]
    fn model_config_roundtrips_through_text() {
        let m = ModelConfig { use_cache: false, norm_mean: [0.1, 0.2, 0.3], ..ModelConfig::desk() };
        let kv = KvConfig::parse(&m.to_kv().to_text()).unwrap();
        let mut back = ModelConfig::default();
        kv.apply(&mut [&mut back]).unwrap();
        assert_eq!(m, back);
        assert_eq!(kv.hash(), m.to_kv().hash());
    }
}
