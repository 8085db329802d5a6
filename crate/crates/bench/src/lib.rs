//! Shared fixtures for the criterion benchmarks.

use pm3e_core::config::RunConfig;
use pm3e_core::data::{generate, Dataset};
use pm3e_core::model::ModelParams;

pub fn desk_scale_config() -> RunConfig {
    RunConfig::default()
}

pub fn desk_scale_fixture() -> (RunConfig, Dataset, ModelParams) {
    let mut cfg = RunConfig::default();
    cfg.synth.records = 512;
    let ds = generate(&cfg.synth, 11).expect("generator");
    let params = ModelParams::init(
        &cfg.model,
        cfg.loss.alpha_init,
        cfg.loss.beta_init,
        cfg.seed,
    )
    .expect("params");
    (cfg, ds, params)
}
