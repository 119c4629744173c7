//! Model configuration and its flat `key = value` text form.

use crate::error::{cfg_err, Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: char,
    pub depth_mult: f64,
    pub width_mult: f64,
    pub max_channels: usize,
}

impl Variant {
    pub const N: Variant = Variant { name: 'n', depth_mult: 0.25, width_mult: 0.25, max_channels: 512 };
    pub const S: Variant = Variant { name: 's', depth_mult: 0.25, width_mult: 0.50, max_channels: 512 };
    pub const M: Variant = Variant { name: 'm', depth_mult: 0.50, width_mult: 0.75, max_channels: 512 };
    pub const X: Variant = Variant { name: 'x', depth_mult: 1.00, width_mult: 1.25, max_channels: 512 };

    pub const ALL: [Variant; 4] = [Self::N, Self::S, Self::M, Self::X];

    pub fn by_name(name: &str) -> Option<Variant> {
        let name = name.strip_prefix("12").unwrap_or(name);
        Self::ALL.into_iter().find(|v| name.len() == 1 && name.starts_with(v.name))
    }

    /// Width scaled by `width_mult`, rounded up to a multiple of 8 and capped.
    pub fn width(&self, base: usize) -> usize {
        let w = (base as f64 * self.width_mult / 8.0).ceil() as usize * 8;
        w.clamp(8, self.max_channels)
    }

    pub fn depth(&self, base: usize) -> usize {
        ((base as f64 * self.depth_mult).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.depth_mult > 0.0 && self.width_mult > 0.0) || self.max_channels < 8 {
            return Err(cfg_err!("variant {}: multipliers must be positive and max_channels ≥ 8", self.name));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub input_size: usize,
    pub area_count: usize,
    pub mlp_ratio: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { variant: Variant::N, num_classes: 3, input_size: 64, area_count: 4, mlp_ratio: 2.0, seed: 0 }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, v: Variant) -> Self {
        self.variant = v;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        if self.num_classes == 0 {
            return Err(cfg_err!("num_classes must be at least 1"));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(cfg_err!("input_size {} is not a positive multiple of 32", self.input_size));
        }
        if self.area_count == 0 {
            return Err(cfg_err!("area_count must be at least 1"));
        }
        // attention runs at strides 16 and 32; the stride-32 grid is the binding one
        let g32 = self.input_size / 32;
        if (g32 * g32) % self.area_count != 0 {
            return Err(cfg_err!(
                "area_count {} does not divide the {g32}×{g32} stride-32 token grid",
                self.area_count
            ));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return Err(cfg_err!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        Ok(())
    }

    /// Parses the text form. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| cfg_err!("line {}: expected `key = value`, got {raw:?}", lineno + 1))?;
            if seen.contains(&key) {
                return Err(cfg_err!("line {}: duplicate key `{key}`", lineno + 1));
            }
            seen.push(key);
            let bad = |what: &str| cfg_err!("line {}: key `{key}`: {what} {value:?}", lineno + 1);
            match key {
                "variant" => cfg.variant = Variant::by_name(value).ok_or_else(|| bad("unknown variant"))?,
                "num_classes" => cfg.num_classes = value.parse().map_err(|_| bad("invalid integer"))?,
                "input_size" => cfg.input_size = value.parse().map_err(|_| bad("invalid integer"))?,
                "area_count" => cfg.area_count = value.parse().map_err(|_| bad("invalid integer"))?,
                "mlp_ratio" => cfg.mlp_ratio = value.parse().map_err(|_| bad("invalid number"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("invalid integer"))?,
                _ => return Err(cfg_err!("line {}: unknown key `{key}`", lineno + 1)),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variant = {}", self.variant.name)?;
        writeln!(f, "num_classes = {}", self.num_classes)?;
        writeln!(f, "input_size = {}", self.input_size)?;
        writeln!(f, "area_count = {}", self.area_count)?;
        writeln!(f, "mlp_ratio = {}", self.mlp_ratio)?;
        writeln!(f, "seed = {}", self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = ModelConfig { variant: Variant::M, num_classes: 7, seed: 42, mlp_ratio: 1.5, ..Default::default() };
        assert_eq!(ModelConfig::parse(&cfg.to_string()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = ModelConfig::parse("# toy\n\nvariant = 12s   # small\n").unwrap();
        assert_eq!(cfg.variant, Variant::S);
        assert_eq!(cfg.input_size, 64);
    }

    #[test]
    fn errors_name_the_key() {
        for (text, key) in [
            ("variant = q", "variant"),
            ("widht = 3", "widht"),
            ("input_size = abc", "input_size"),
            ("seed = 1\nseed = 2", "seed"),
        ] {
            match ModelConfig::parse(text) {
                Err(Error::Config(m)) => assert!(m.contains(key), "{m}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn invariants() {
        assert!(ModelConfig::parse("input_size = 48").is_err());
        assert!(ModelConfig::parse("input_size = 96").is_err());
        assert!(ModelConfig::parse("input_size = 128").is_ok());
        assert!(ModelConfig::parse("area_count = 3").is_err());
        assert!(ModelConfig::parse("num_classes = 0").is_err());
    }

    #[test]
    fn widths_and_depths() {
        assert_eq!(Variant::N.width(64), 16);
        assert_eq!(Variant::X.width(1024), 512);
        assert_eq!(Variant::N.depth(2), 1);
        assert_eq!(Variant::X.depth(4), 4);
    }
}
