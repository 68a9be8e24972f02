//! Textual `key=value` configuration and the model hyperparameters.
//!
//! Lines may carry `#` comments; later assignments override earlier ones.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Insertion-ordered key/value pairs. Unknown keys are kept verbatim.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: Vec<(String, String)>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvConfig::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", no + 1)))?;
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: bad key `{k}`", no + 1)));
            }
            kv.set(k, v.trim());
        }
        Ok(kv)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    /// Applies every entry of `other` on top of `self`.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.set(k, v);
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn read_into<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.value(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn read_bool(&self, key: &str, slot: &mut bool) -> Result<()> {
        match self.get(key) {
            None => Ok(()),
            Some("1" | "true" | "yes" | "on") => {
                *slot = true;
                Ok(())
            }
            Some("0" | "false" | "no" | "off") => {
                *slot = false;
                Ok(())
            }
            Some(v) => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
        }
    }
}

/// Encoder stages; the decoder wiring and the bottleneck fusion assume four.
pub const STAGES: usize = 4;

/// Total downsampling of the deepest stage.
pub const STRIDE: usize = 4 << (STAGES - 1);

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Stage-1 width `C`; stage `i` (0-based) has `C * 2^i` channels.
    pub channels: usize,
    pub window: usize,
    /// Attention heads at stage 1, doubled per stage.
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    /// Feed RGB and raw depth (4 channels) to the attention branch instead of RGB only.
    pub rgbd_input: bool,
    pub use_smfm: bool,
    pub use_btmfm: bool,
    pub fusion_heads: usize,
    pub ssm_expand: usize,
    pub ssm_state: usize,
    pub ssm_conv: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 24,
            window: 4,
            heads: 2,
            blocks: 2,
            mlp_ratio: 4,
            rgbd_input: true,
            use_smfm: true,
            use_btmfm: true,
            fusion_heads: 4,
            ssm_expand: 2,
            ssm_state: 4,
            ssm_conv: 4,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            channels: 8,
            ..Self::default()
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.channels << stage
    }

    pub fn stage_heads(&self, stage: usize) -> usize {
        self.heads << stage
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        let fail = |m: String| Err(Error::Config(m));
        if c == 0 || !c.is_multiple_of(4) {
            return fail(format!("channels must be a positive multiple of 4, got {c}"));
        }
        for s in 0..STAGES {
            if self.heads == 0 || !self.stage_channels(s).is_multiple_of(self.stage_heads(s)) {
                return fail(format!(
                    "stage {} width {} not divisible by {} heads",
                    s + 1,
                    self.stage_channels(s),
                    self.stage_heads(s)
                ));
            }
        }
        let c4 = self.stage_channels(STAGES - 1);
        if self.fusion_heads == 0 || !c4.is_multiple_of(self.fusion_heads) {
            return fail(format!("bottleneck width {c4} not divisible by {} fusion heads", self.fusion_heads));
        }
        if self.window == 0 || self.blocks == 0 || self.mlp_ratio == 0 {
            return fail("window, blocks and mlp_ratio must be positive".into());
        }
        if self.ssm_expand == 0 || self.ssm_state == 0 || self.ssm_conv == 0 {
            return fail("ssm_expand, ssm_state and ssm_conv must be positive".into());
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("channels", self.channels);
        kv.set("window", self.window);
        kv.set("heads", self.heads);
        kv.set("blocks", self.blocks);
        kv.set("mlp_ratio", self.mlp_ratio);
        kv.set("rgbd_input", self.rgbd_input);
        kv.set("use_smfm", self.use_smfm);
        kv.set("use_btmfm", self.use_btmfm);
        kv.set("fusion_heads", self.fusion_heads);
        kv.set("ssm_expand", self.ssm_expand);
        kv.set("ssm_state", self.ssm_state);
        kv.set("ssm_conv", self.ssm_conv);
    }

    pub fn read_kv(&mut self, kv: &KvConfig) -> Result<()> {
        kv.read_into("channels", &mut self.channels)?;
        kv.read_into("window", &mut self.window)?;
        kv.read_into("heads", &mut self.heads)?;
        kv.read_into("blocks", &mut self.blocks)?;
        kv.read_into("mlp_ratio", &mut self.mlp_ratio)?;
        kv.read_bool("rgbd_input", &mut self.rgbd_input)?;
        kv.read_bool("use_smfm", &mut self.use_smfm)?;
        kv.read_bool("use_btmfm", &mut self.use_btmfm)?;
        kv.read_into("fusion_heads", &mut self.fusion_heads)?;
        kv.read_into("ssm_expand", &mut self.ssm_expand)?;
        kv.read_into("ssm_state", &mut self.ssm_state)?;
        kv.read_into("ssm_conv", &mut self.ssm_conv)?;
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_comments_and_overrides() {
        let kv = KvConfig::parse("# header\nchannels = 8 # desk\n\nlr=0.001\nchannels=16\nnote=a b c\n").unwrap();
        assert_eq!(kv.get("channels"), Some("16"));
        assert_eq!(kv.get("note"), Some("a b c"));
        assert_eq!(kv.len(), 3);
        assert_eq!(kv.value::<f64>("lr").unwrap(), Some(0.001));
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(KvConfig::parse("channels 8").is_err());
        assert!(KvConfig::parse("=3").is_err());
    }

    #[test]
    fn model_round_trip() {
        let mut m = ModelConfig::desk();
        m.use_btmfm = false;
        let mut kv = KvConfig::new();
        m.write_kv(&mut kv);
        let mut back = ModelConfig::default();
        back.read_kv(&KvConfig::parse(&kv.to_text()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn validate_widths() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig { channels: 6, ..ModelConfig::desk() }.validate().is_err());
        assert!(ModelConfig { heads: 3, ..ModelConfig::desk() }.validate().is_err());
        assert_eq!(STRIDE, 32);
    }
}
