use std::fmt;
use std::path::Path;

use beamkin::montecarlo::McModel;
use beamkin::{BeamChannel, Error, TurbulenceSpectrum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Bad configuration file or option value.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub r0_m: f64,
    pub q0_per_m: f64,
    pub z_m: f64,
    pub n_photons: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            r0_m: 0.01,
            q0_per_m: 1e7,
            z_m: 20_000.0,
            n_photons: 1e8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumConfig {
    pub cn2: f64,
    pub inner_scale_m: f64,
    pub outer_scale_m: Option<f64>,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            cn2: 2.5e-14,
            inner_scale_m: 1e-3,
            outer_scale_m: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub photons: usize,
    pub seed: u64,
    pub model: McModel,
    pub z_samples_m: Vec<f64>,
    pub histograms: bool,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            photons: 100_000,
            seed: 1,
            model: McModel::Force,
            z_samples_m: vec![5_000.0, 10_000.0, 20_000.0],
            histograms: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub channel: ChannelConfig,
    pub spectrum: SpectrumConfig,
    pub mc: McSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError(format!("config field `{path}`: {}", e.into_inner()))
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    /// Applies the physical invariants, reporting the offending field path.
    pub fn check(&self) -> Result<(), ConfigError> {
        self.channel()?;
        self.spectrum()?;
        let mc = &self.mc;
        if mc.photons == 0 {
            return Err(ConfigError("config field `mc.photons`: must be >= 1".into()));
        }
        if mc.z_samples_m.iter().any(|z| !(z.is_finite() && *z >= 0.0)) {
            return Err(ConfigError(
                "config field `mc.z_samples_m`: distances must be finite and >= 0".into(),
            ));
        }
        if mc.z_samples_m.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ConfigError(
                "config field `mc.z_samples_m`: must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn channel(&self) -> Result<BeamChannel, ConfigError> {
        let c = &self.channel;
        BeamChannel::new(c.r0_m, c.q0_per_m, c.z_m, c.n_photons).map_err(|e| field_error("channel", e))
    }

    pub fn spectrum(&self) -> Result<TurbulenceSpectrum, ConfigError> {
        let s = &self.spectrum;
        TurbulenceSpectrum::new(s.cn2, s.inner_scale_m, s.outer_scale_m).map_err(|e| field_error("spectrum", e))
    }

    /// SHA-256 of the resolved configuration plus the command description.
    pub fn hash(&self, command: &str) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(self).expect("config serializes"));
        h.update(b"\n");
        h.update(command.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn field_error(section: &str, e: Error) -> ConfigError {
    match e {
        Error::InvalidParameter { name, reason } => {
            let key = match name {
                "r0" => "r0_m",
                "q0" => "q0_per_m",
                "z" => "z_m",
                "inner_scale" => "inner_scale_m",
                "outer_scale" => "outer_scale_m",
                other => other,
            };
            ConfigError(format!("config field `{section}.{key}`: {reason}"))
        }
        other => ConfigError(format!("config section `{section}`: {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_reference_values() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.spectrum().unwrap().outer_scale, None);
        assert_eq!(cfg.channel().unwrap().z, 20_000.0);
    }

    #[test]
    fn partial_override() {
        let cfg = RunConfig::from_json(r#"{"spectrum": {"cn2": 1e-15, "outer_scale_m": 10}}"#).unwrap();
        let s = cfg.spectrum().unwrap();
        assert_eq!((s.cn2, s.outer_scale, s.inner_scale), (1e-15, Some(10.0), 1e-3));
    }

    #[test]
    fn type_errors_carry_path() {
        let e = RunConfig::from_json(r#"{"channel": {"z_m": "far"}}"#).unwrap_err();
        assert!(e.0.contains("channel.z_m"), "{e}");
        let e = RunConfig::from_json(r#"{"spectrum": {"cn3": 1}}"#).unwrap_err();
        assert!(e.0.contains("spectrum"), "{e}");
    }

    #[test]
    fn invariant_errors_carry_path() {
        let e = RunConfig::from_json(r#"{"spectrum": {"inner_scale_m": -1}}"#).unwrap_err();
        assert!(e.0.contains("spectrum.inner_scale_m"), "{e}");
        let e = RunConfig::from_json(r#"{"channel": {"r0_m": 0}}"#).unwrap_err();
        assert!(e.0.contains("channel.r0_m"), "{e}");
        let e = RunConfig::from_json(r#"{"mc": {"z_samples_m": [2, 1]}}"#).unwrap_err();
        assert!(e.0.contains("mc.z_samples_m"), "{e}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.channel.z_m = 10_000.0;
        assert_eq!(a.hash("x"), a.hash("x"));
        assert_ne!(a.hash("x"), b.hash("x"));
        assert_ne!(a.hash("x"), a.hash("y"));
        assert_eq!(a.hash("x").len(), 64);
    }
}
