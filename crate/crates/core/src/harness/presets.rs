use super::config::ExperimentConfig;
use crate::error::{Error, Result};

/// Built-in experiment manifests, named after the figures they reproduce.
pub const PRESETS: &[(&str, &str)] = &[
    ("fig1", include_str!("../../presets/fig1.toml")),
    ("fig2a", include_str!("../../presets/fig2a.toml")),
    ("fig2b", include_str!("../../presets/fig2b.toml")),
    ("fig4", include_str!("../../presets/fig4.toml")),
    ("figD1", include_str!("../../presets/figD1.toml")),
    ("figD2", include_str!("../../presets/figD2.toml")),
    ("figD3", include_str!("../../presets/figD3.toml")),
    ("figD4", include_str!("../../presets/figD4.toml")),
    ("figD5", include_str!("../../presets/figD5.toml")),
    ("figD6", include_str!("../../presets/figD6.toml")),
    ("figD7", include_str!("../../presets/figD7.toml")),
    ("figD8", include_str!("../../presets/figD8.toml")),
];

pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown preset `{name}`; available: {}", names.join(", ")))
        })
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::parse(preset_text(name)?).map_err(|e| Error::Config(format!("preset {name}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Experiment;

    #[test]
    fn every_preset_validates() {
        for (name, _) in PRESETS {
            let cfg = preset(name).unwrap();
            Experiment::new(cfg, None, None, None).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(matches!(preset("nope"), Err(Error::Config(_))));
    }
}
