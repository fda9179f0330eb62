#![allow(dead_code)]

use std::path::PathBuf;

use qkdbench_core::model::{load_config, Config, GainConvention, LinkConfig, ProtocolConfig, SourceConfig};

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

/// The tabulated 6 dB operating point, loaded from the shipped example file.
pub fn table1() -> Config {
    load_config(config_path("table1.toml")).expect("table1.toml loads")
}

/// Table-1 intensities in code, for tests that tweak fields directly.
pub fn table1_source() -> SourceConfig {
    SourceConfig {
        mu: 0.5,
        nu1: 0.066,
        nu2: 0.002,
        ..SourceConfig::default()
    }
}

pub fn table1_link() -> LinkConfig {
    LinkConfig {
        attenuation_db: 6.0,
        background_suppression: Some(1.0),
        gain_convention: GainConvention::AttenuationOnly,
        ..LinkConfig::default()
    }
}

pub fn protocol() -> ProtocolConfig {
    ProtocolConfig::default()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}
