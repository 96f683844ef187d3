//! Architecture hyperparameters and their flat `key = value` text form.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Names accepted by [`ModelConfig::named`].
pub const NAMED_CONFIGS: [&str; 4] = ["effloc", "effloc-small", "effloc-xs", "tiny"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    /// Channels per stage.
    pub widths: [usize; 3],
    /// Sandwich blocks per stage.
    pub depths: [usize; 3],
    /// Attention heads per stage.
    pub heads: [usize; 3],
    /// Token-interaction + FFN pairs on each side of the attention layer.
    pub ffn_count: usize,
    pub ffn_expansion: usize,
    /// Per-head query/key width, per stage.
    pub qk_dim: [usize; 3],
    /// Per-head value width as a multiple of the channel split `C / n`.
    pub v_dim_ratio: f64,
    pub dw_kernel: usize,
    pub input_resolution: usize,
    pub embed_downsample_factor: usize,
    pub regressor_hidden: Vec<usize>,
    pub dropout_p: f64,
    /// Applies an extra softmax over the concatenated head outputs before the
    /// output projection.
    pub literal_outer_softmax: bool,
}

impl ModelConfig {
    fn base(name: &str, widths: [usize; 3], depths: [usize; 3], heads: [usize; 3]) -> Self {
        Self {
            name: name.to_string(),
            widths,
            depths,
            heads,
            ffn_count: 1,
            ffn_expansion: 2,
            qk_dim: [16; 3],
            v_dim_ratio: 1.0,
            dw_kernel: 3,
            input_resolution: 256,
            embed_downsample_factor: 16,
            regressor_hidden: vec![2048, 1024],
            dropout_p: 0.5,
            literal_outer_softmax: false,
        }
    }

    pub fn effloc() -> Self {
        Self::base("effloc", [192, 288, 384], [1, 3, 4], [3, 3, 4])
    }

    pub fn effloc_small() -> Self {
        Self::base("effloc-small", [128, 256, 384], [1, 2, 3], [4, 4, 4])
    }

    pub fn effloc_xs() -> Self {
        Self::base("effloc-xs", [128, 240, 320], [1, 2, 3], [4, 3, 4])
    }

    /// Desk-scale variant used by the tests and the default training run.
    pub fn tiny() -> Self {
        Self {
            input_resolution: 64,
            embed_downsample_factor: 8,
            regressor_hidden: vec![128],
            ..Self::base("tiny", [16, 24, 32], [1, 1, 1], [2, 2, 2])
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "effloc" => Ok(Self::effloc()),
            "effloc-small" | "small" => Ok(Self::effloc_small()),
            "effloc-xs" | "xs" => Ok(Self::effloc_xs()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown config '{other}', expected one of: {}",
                NAMED_CONFIGS.join(", ")
            ))),
        }
    }

    pub fn named_configs() -> Vec<Self> {
        vec![Self::effloc(), Self::effloc_small(), Self::effloc_xs(), Self::tiny()]
    }

    /// Number of stride-2 convolutions in the patch embedding.
    pub fn stem_depth(&self) -> usize {
        self.embed_downsample_factor.trailing_zeros() as usize
    }

    /// Output channels of each stem convolution, ending at `D₁`.
    pub fn stem_channels(&self) -> Vec<usize> {
        let n = self.stem_depth();
        (0..n).map(|i| (self.widths[0] >> (n - 1 - i)).max(1)).collect()
    }

    /// Spatial side length of the feature map in stage `s`.
    pub fn stage_resolution(&self, s: usize) -> usize {
        (self.input_resolution / self.embed_downsample_factor) >> s
    }

    pub fn head_split(&self, s: usize) -> usize {
        self.widths[s] / self.heads[s]
    }

    pub fn v_dim(&self, s: usize) -> usize {
        (self.head_split(s) as f64 * self.v_dim_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = self.widths.iter().chain(&self.depths).chain(&self.heads).chain(&self.qk_dim);
        if positive.into_iter().any(|&v| v == 0)
            || self.ffn_count == 0
            || self.ffn_expansion == 0
            || self.dw_kernel == 0
            || self.input_resolution == 0
        {
            return bad("all widths, depths, heads, qk dims and sizes must be positive".into());
        }
        if self.regressor_hidden.contains(&0) {
            return bad("regressor hidden widths must be positive".into());
        }
        if self.dw_kernel % 2 == 0 {
            return bad(format!("dw_kernel must be odd, got {}", self.dw_kernel));
        }
        let f = self.embed_downsample_factor;
        if f < 2 || !f.is_power_of_two() {
            return bad(format!("embed_downsample_factor must be a power of two >= 2, got {f}"));
        }
        if self.input_resolution % (f * 4) != 0 {
            return bad(format!(
                "input_resolution {} must be divisible by {} (embedding factor {f} and two stage downsamplings)",
                self.input_resolution,
                f * 4
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        for s in 0..3 {
            let (c, n) = (self.widths[s], self.heads[s]);
            if c % n != 0 {
                return bad(format!("stage {s}: width {c} is not divisible by {n} heads"));
            }
            let v = self.head_split(s) as f64 * self.v_dim_ratio;
            if v < 1.0 || (v - v.round()).abs() > 1e-9 {
                return bad(format!("stage {s}: v_dim_ratio {} gives a non-integer value width", self.v_dim_ratio));
            }
            if n > 1 && self.v_dim(s) != self.head_split(s) {
                return bad(format!(
                    "stage {s}: cascading {n} heads needs v_dim == C/n = {}, got {}",
                    self.head_split(s),
                    self.v_dim(s)
                ));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "widths = {}", list(&self.widths));
        let _ = writeln!(s, "depths = {}", list(&self.depths));
        let _ = writeln!(s, "heads = {}", list(&self.heads));
        let _ = writeln!(s, "ffn_count = {}", self.ffn_count);
        let _ = writeln!(s, "ffn_expansion = {}", self.ffn_expansion);
        let _ = writeln!(s, "qk_dim = {}", list(&self.qk_dim));
        let _ = writeln!(s, "v_dim_ratio = {}", self.v_dim_ratio);
        let _ = writeln!(s, "dw_kernel = {}", self.dw_kernel);
        let _ = writeln!(s, "input_resolution = {}", self.input_resolution);
        let _ = writeln!(s, "embed_downsample_factor = {}", self.embed_downsample_factor);
        let _ = writeln!(s, "regressor_hidden = {}", list(&self.regressor_hidden));
        let _ = writeln!(s, "dropout_p = {}", self.dropout_p);
        let _ = writeln!(s, "literal_outer_softmax = {}", self.literal_outer_softmax);
        s
    }

    /// Parses the `key = value` form. Missing keys keep the values of the
    /// named base config given by `name` (or Tiny when absent); unknown keys
    /// are rejected.
    pub fn from_kv(text: &str) -> Result<Self> {
        Self::from_kv_skipping(text, &[])
    }

    /// Like [`ModelConfig::from_kv`], skipping keys that start with any of
    /// `prefixes` (used for extra entries in checkpoint config blocks).
    pub fn from_kv_skipping(text: &str, prefixes: &[&str]) -> Result<Self> {
        let pairs: Vec<(String, String)> = parse_kv(text)?
            .into_iter()
            .filter(|(k, _)| !prefixes.iter().any(|p| k.starts_with(p)))
            .collect();
        let mut cfg = match pairs.iter().find(|(k, _)| k == "name") {
            Some((_, v)) => Self::named(v).unwrap_or_else(|_| Self {
                name: v.clone(),
                ..Self::tiny()
            }),
            None => Self::tiny(),
        };
        for (k, v) in &pairs {
            let k = k.as_str();
            match k {
                "name" => cfg.name = v.clone(),
                "widths" => cfg.widths = triple(k, v)?,
                "depths" => cfg.depths = triple(k, v)?,
                "heads" => cfg.heads = triple(k, v)?,
                "qk_dim" => cfg.qk_dim = triple(k, v)?,
                "ffn_count" => cfg.ffn_count = num(k, v)?,
                "ffn_expansion" => cfg.ffn_expansion = num(k, v)?,
                "v_dim_ratio" => cfg.v_dim_ratio = num(k, v)?,
                "dw_kernel" => cfg.dw_kernel = num(k, v)?,
                "input_resolution" => cfg.input_resolution = num(k, v)?,
                "embed_downsample_factor" => cfg.embed_downsample_factor = num(k, v)?,
                "regressor_hidden" => cfg.regressor_hidden = list(k, v)?,
                "dropout_p" => cfg.dropout_p = num(k, v)?,
                "literal_outer_softmax" => cfg.literal_outer_softmax = num(k, v)?,
                _ => return Err(Error::Config(format!("unknown config key '{k}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let items = list(key, v)?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("'{key}' needs exactly three values, got '{v}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_values() {
        let e = ModelConfig::effloc();
        assert_eq!((e.widths[2], e.depths[2], e.heads[2]), (384, 4, 4));
        let xs = ModelConfig::effloc_xs();
        assert_eq!(xs.widths, [128, 240, 320]);
        assert_eq!(xs.heads, [4, 3, 4]);
        let s = ModelConfig::effloc_small();
        assert_eq!((s.widths, s.depths, s.heads), ([128, 256, 384], [1, 2, 3], [4, 4, 4]));
        let t = ModelConfig::tiny();
        assert_eq!(t.widths[2] % t.heads[2], 0);
        for c in ModelConfig::named_configs() {
            c.validate().unwrap();
        }
    }

    #[test]
    fn stem_and_stage_geometry() {
        let e = ModelConfig::effloc();
        assert_eq!(e.stem_channels(), vec![24, 48, 96, 192]);
        assert_eq!((0..3).map(|s| e.stage_resolution(s)).collect::<Vec<_>>(), vec![16, 8, 4]);
        let t = ModelConfig::tiny();
        assert_eq!(t.stem_channels(), vec![4, 8, 16]);
        assert_eq!(t.stage_resolution(0), 8);
        assert_eq!(ModelConfig::effloc().head_split(2), 96);
    }

    #[test]
    fn kv_round_trip() {
        for c in ModelConfig::named_configs() {
            let back = ModelConfig::from_kv(&c.to_kv()).unwrap();
            assert_eq!(back, c);
        }
        let mut c = ModelConfig::tiny();
        c.regressor_hidden.clear();
        c.literal_outer_softmax = true;
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(matches!(ModelConfig::named("bogus"), Err(Error::Config(_))));
        let mut c = ModelConfig::tiny();
        c.heads = [3, 2, 2];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.input_resolution = 72;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.v_dim_ratio = 0.5;
        assert!(c.validate().is_err());
        assert!(ModelConfig::from_kv("widths = 1,2").is_err());
        assert!(ModelConfig::from_kv("colour = blue").is_err());
        let text = format!("{}state.epoch = 3\n", ModelConfig::tiny().to_kv());
        assert_eq!(ModelConfig::from_kv_skipping(&text, &["state."]).unwrap(), ModelConfig::tiny());
    }
}
