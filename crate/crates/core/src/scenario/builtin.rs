//! Scenario files shipped with the repository, embedded at build time.

use super::config::{ConfigError, ScenarioConfig};

const BUILTIN: &[(&str, &str)] = &[
    (
        "ring5_admissible",
        include_str!("../../../../scenarios/ring5_admissible.toml"),
    ),
    (
        "ring5_inadmissible",
        include_str!("../../../../scenarios/ring5_inadmissible.toml"),
    ),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(n, _)| *n)
}

pub fn source(name: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Parsed built-in scenario, or `None` for an unknown name.
pub fn load(name: &str) -> Option<Result<ScenarioConfig, ConfigError>> {
    source(name).map(ScenarioConfig::from_toml_str)
}
