#![allow(dead_code)]

use std::path::Path;

use utilgen_harness::ExperimentConfig;

/// A pipeline small enough to run several times per test binary.
pub const TINY: &str = r#"
seed = 7

[task]
train = 160
validation = 40
test = 200

[denoiser_train]
steps = 300

[token]
steps = 20

[warmup]
per_class = 20
sampling_steps = 10
few_shot = 4

[todv]
max_iters = 40

[mlco]
iterations = 1
max_steps_per_class = 4
sampling_steps = 10

[ilpo]
prompt_epochs = 5
noise_draws = 2
chain_steps = 5
refine_steps = 10
sampling_steps = 10

[train]
epochs = 5

[synthesis]
budget = 0.5
scaling_budgets = [0.25, 0.5]

[analysis]
influence_samples = 60
"#;

pub fn tiny(out: &Path) -> ExperimentConfig {
    tiny_with(out, "")
}

/// The tiny config with extra dotted keys for sections it leaves unset.
pub fn tiny_with(out: &Path, extra: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(&format!("{extra}\n{TINY}"), None).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
