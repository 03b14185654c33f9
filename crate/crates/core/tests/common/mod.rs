#![allow(dead_code)]

pub mod inject;
pub mod shadow;

use ppml_core::harness::TrainingRunConfig;

/// Default config cut down to `rounds` rounds.
pub fn quick_config(rounds: u32) -> TrainingRunConfig {
    TrainingRunConfig {
        max_rounds: rounds,
        ..TrainingRunConfig::default()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
