//! Network hyperparameters: variants, channel widths, dilation schedule,
//! and the component toggles for ablation runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference input resolution the published schedule shapes are stated at.
pub const REFERENCE_RESOLUTION: usize = 384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Small,
}

impl Variant {
    pub fn width_multiplier(self) -> f64 {
        match self {
            Variant::Full => 1.0,
            Variant::Small => 0.5,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "full" => Ok(Variant::Full),
            "small" => Ok(Variant::Small),
            other => Err(Error::InvalidConfig(format!("unknown variant '{other}'"))),
        }
    }
}

/// One row of the dilation schedule: which block, what it sees and produces
/// at the reference resolution, and the dilation rates of its branches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub block: String,
    /// (height, width, channels) of the module input.
    pub input: (usize, usize, usize),
    pub rates: Vec<usize>,
    /// (height, width, channels) of the block output.
    pub output: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DilationSchedule {
    pub entries: Vec<ScheduleEntry>,
}

impl DilationSchedule {
    /// The published configuration: encoder blocks HB1/HB2 and decoder
    /// blocks CB2/CB3 with their rates and reference shapes.
    pub fn reference() -> DilationSchedule {
        let row = |block: &str, input, rates: &[usize], output| ScheduleEntry {
            block: block.to_string(),
            input,
            rates: rates.to_vec(),
            output,
        };
        DilationSchedule {
            entries: vec![
                row("HB1", (192, 192, 64), &[6, 10, 14, 18, 22], (96, 96, 128)),
                row("HB2", (96, 96, 128), &[6, 10, 14, 18], (48, 48, 128)),
                row("CB2", (48, 48, 64), &[6, 10, 14, 18], (48, 48, 64)),
                row("CB3", (96, 96, 64), &[6, 10, 14, 18, 22], (96, 96, 64)),
            ],
        }
    }

    pub fn rates_for(&self, block: &str) -> Result<&[usize]> {
        self.entries
            .iter()
            .find(|e| e.block == block)
            .map(|e| e.rates.as_slice())
            .ok_or_else(|| Error::InvalidConfig(format!("no dilation schedule entry for {block}")))
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if e.rates.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "{}: empty rate list",
                    e.block
                )));
            }
            if !e.rates.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::InvalidConfig(format!(
                    "{}: rates must be strictly increasing, got {:?}",
                    e.block, e.rates
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub base_channels: usize,
    pub width_multiplier: f64,
    pub dilation_schedule: DilationSchedule,
    pub enable_msa: bool,
    pub enable_mrffam: bool,
    pub enable_mrffam_decoder: bool,
    pub enable_lpm: bool,
    pub enable_contour_head: bool,
    pub attention_heads: usize,
    pub groupnorm_groups: usize,
    pub input_resolution: usize,
}

impl NetworkConfig {
    pub fn full() -> NetworkConfig {
        NetworkConfig {
            variant: Variant::Full,
            base_channels: 64,
            width_multiplier: 1.0,
            dilation_schedule: DilationSchedule::reference(),
            enable_msa: true,
            enable_mrffam: true,
            enable_mrffam_decoder: true,
            enable_lpm: true,
            enable_contour_head: true,
            attention_heads: 1,
            groupnorm_groups: 8,
            input_resolution: REFERENCE_RESOLUTION,
        }
    }

    pub fn small() -> NetworkConfig {
        NetworkConfig {
            variant: Variant::Small,
            width_multiplier: 0.5,
            ..NetworkConfig::full()
        }
    }

    /// Desk-scale configuration for tests and the gradient audit: narrow
    /// channels at a small input resolution, full topology.
    pub fn toy(width: usize, resolution: usize) -> NetworkConfig {
        NetworkConfig {
            base_channels: width,
            groupnorm_groups: if width.is_multiple_of(8) {
                8
            } else {
                width.min(4)
            },
            input_resolution: resolution,
            ..NetworkConfig::full()
        }
    }

    /// Channel count after the width multiplier.
    pub fn scaled(&self, channels: usize) -> usize {
        ((channels as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// Stem output channels; every other width derives from this.
    pub fn stem_channels(&self) -> usize {
        self.scaled(self.base_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be >= 1".into()));
        }
        if self.width_multiplier <= 0.0 {
            return Err(Error::InvalidConfig("width_multiplier must be > 0".into()));
        }
        if !self.enable_msa && !self.enable_mrffam && !self.enable_lpm {
            return Err(Error::InvalidConfig(
                "at least one encoder branch (msa, mrffam, lpm) must be enabled".into(),
            ));
        }
        if self.attention_heads == 0 {
            return Err(Error::InvalidConfig("attention_heads must be >= 1".into()));
        }
        let stem = self.stem_channels();
        if self.groupnorm_groups == 0 || !stem.is_multiple_of(self.groupnorm_groups) {
            return Err(Error::InvalidConfig(format!(
                "stem channels {stem} not divisible by groupnorm_groups {}",
                self.groupnorm_groups
            )));
        }
        if !stem.is_multiple_of(self.attention_heads) {
            return Err(Error::InvalidConfig(format!(
                "stem channels {stem} not divisible by attention_heads {}",
                self.attention_heads
            )));
        }
        if self.input_resolution == 0 || !self.input_resolution.is_multiple_of(16) {
            return Err(Error::InvalidConfig(format!(
                "input_resolution {} must be a positive multiple of 16",
                self.input_resolution
            )));
        }
        self.dilation_schedule.validate()?;
        for block in ["HB1", "HB2", "CB2", "CB3"] {
            self.dilation_schedule.rates_for(block)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_schedule_matches_published_rates() {
        let s = DilationSchedule::reference();
        assert_eq!(s.rates_for("HB1").unwrap(), &[6, 10, 14, 18, 22]);
        assert_eq!(s.rates_for("HB2").unwrap(), &[6, 10, 14, 18]);
        assert_eq!(s.rates_for("CB2").unwrap(), &[6, 10, 14, 18]);
        assert_eq!(s.rates_for("CB3").unwrap(), &[6, 10, 14, 18, 22]);
        s.validate().unwrap();
    }

    #[test]
    fn non_increasing_rates_rejected() {
        let mut s = DilationSchedule::reference();
        s.entries[0].rates = vec![6, 6, 10];
        assert!(s.validate().is_err());
    }

    #[test]
    fn default_configs_validate() {
        NetworkConfig::full().validate().unwrap();
        NetworkConfig::small().validate().unwrap();
        NetworkConfig::toy(8, 96).validate().unwrap();
    }

    #[test]
    fn all_branches_disabled_is_invalid() {
        let mut c = NetworkConfig::full();
        c.enable_msa = false;
        c.enable_mrffam = false;
        c.enable_lpm = false;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("encoder branch"), "{err}");
    }

    #[test]
    fn resolution_must_be_multiple_of_16() {
        let mut c = NetworkConfig::full();
        c.input_resolution = 100;
        assert!(c.validate().is_err());
        c.input_resolution = 416;
        c.validate().unwrap();
    }

    #[test]
    fn small_variant_halves_widths() {
        let c = NetworkConfig::small();
        assert_eq!(c.stem_channels(), 32);
        assert_eq!(c.scaled(128), 64);
    }

    #[test]
    fn config_json_round_trip() {
        let c = NetworkConfig::full();
        let json = serde_json::to_string(&c).unwrap();
        let back: NetworkConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }
}
