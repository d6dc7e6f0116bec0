//! Shared inputs for the benchmarks.

use wmseg::attacks::build_setting;
use wmseg::experiment::ExperimentConfig;
use wmseg::{Scheme, SettingInstance};

/// Setting 4 text for `scheme` under the default model.
pub fn setting4(scheme: Scheme, seed: u64) -> SettingInstance {
    let config = ExperimentConfig::default();
    let model = config.model().expect("default model is valid");
    build_setting(4, &model, scheme, seed, config.prompt_len).expect("setting 4 builds")
}
