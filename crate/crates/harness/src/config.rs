//! Experiment configuration.
//!
//! Configs are TOML files whose keys carry section prefixes
//! (`todv.max_iters = 2000` or a `[todv]` table). Every key has a default;
//! unknown keys are rejected. Sections with a `seed` key that the file leaves
//! unset get a seed derived from the root seed, so the resolved config lists
//! every value a run actually used.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use utilgen_core::classifier::{Architecture, TrainConfig};
use utilgen_core::data::{SplitSizes, TaskSpec};
use utilgen_core::diffusion::{DenoiserArch, DenoiserTrainConfig, NoiseSchedule, TokenConfig};
use utilgen_core::ilpo::IlpoConfig;
use utilgen_core::mlco::DpoConfig;
use utilgen_core::rng;
use utilgen_core::todv::TodvConfig;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// One mode per class on a ring.
    Ring,
    /// Two modes per class; see [`TaskSpec::two_subpopulation`].
    TwoSubpopulation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub radius: f64,
    /// Radius of the second mode (two-subpopulation only).
    pub inner_radius: f64,
    /// Angular offset of the second mode in radians (two-subpopulation only).
    pub offset: f64,
    pub scale: f64,
    /// Validation/test weight on the first mode (two-subpopulation only).
    pub primary_weight: f64,
    pub label_noise: f64,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::TwoSubpopulation,
            num_classes: 4,
            feature_dim: 2,
            radius: 3.0,
            inner_radius: 2.0,
            offset: 0.5,
            scale: 0.5,
            primary_weight: 0.9,
            label_noise: 0.0,
            train: 1000,
            validation: 200,
            test: 1000,
        }
    }
}

impl TaskConfig {
    pub fn spec(&self) -> TaskSpec {
        match self.kind {
            TaskKind::Ring => {
                TaskSpec::ring(self.num_classes, self.feature_dim, self.radius, self.scale, self.label_noise)
            }
            TaskKind::TwoSubpopulation => TaskSpec::two_subpopulation(
                self.num_classes,
                self.feature_dim,
                self.radius,
                self.inner_radius,
                self.offset,
                self.scale,
                self.primary_weight,
                self.label_noise,
            ),
        }
    }

    pub fn sizes(&self) -> SplitSizes {
        SplitSizes { train: self.train, validation: self.validation, test: self.test }
    }

    /// Mode that the validation composition weights most heavily.
    pub fn preferred_mode(&self) -> usize {
        match self.kind {
            TaskKind::Ring => 0,
            TaskKind::TwoSubpopulation => usize::from(self.primary_weight < 0.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 50, beta_start: 0.002, beta_end: 0.4 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?)
    }
}

/// Base-generator samples mixed into the TODV training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub per_class: usize,
    pub guidance: f64,
    pub sampling_steps: usize,
    /// Real instances per class used for token learning and prototypes.
    pub few_shot: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self { per_class: 250, guidance: 2.0, sampling_steps: 50, few_shot: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Architecture in the TODV loop and for downstream training.
    pub arch: Architecture,
    /// Second architecture of the reusability experiment.
    pub reuse_arch: Architecture,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { arch: Architecture::SMALL, reuse_arch: Architecture::WIDE }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    SyntheticOnly,
    Joint,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::SyntheticOnly => "synthetic-only",
            Regime::Joint => "joint",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-only" => Ok(Regime::SyntheticOnly),
            "joint" => Ok(Regime::Joint),
            other => Err(Error::Config(format!("unknown regime '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Synthetic set size as a multiple of the real training set.
    pub budget: f64,
    pub regimes: Vec<Regime>,
    /// Budgets swept by the scaling experiment.
    pub scaling_budgets: Vec<f64>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            budget: 1.0,
            regimes: vec![Regime::SyntheticOnly, Regime::Joint],
            scaling_budgets: vec![1.0, 3.0, 5.0],
        }
    }
}

/// Switches for the optimisation stages. With all three off the pipeline
/// reduces to plain base-generator synthesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub todv: bool,
    pub mlco: bool,
    pub ilpo: bool,
    /// Retrain the weight net on the fine-tuned generator's output before
    /// prompt optimisation.
    pub retrain_weight_net: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { todv: true, mlco: true, ilpo: true, retrain_weight_net: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub probe_lambda: f64,
    /// Synthetic samples (evenly strided) entering the influence probe.
    pub influence_samples: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { probe_lambda: 1e-3, influence_samples: 400 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub task: TaskConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserArch,
    pub denoiser_train: DenoiserTrainConfig,
    pub token: TokenConfig,
    pub warmup: WarmupConfig,
    pub classifier: ClassifierConfig,
    pub todv: TodvConfig,
    pub mlco: DpoConfig,
    pub ilpo: IlpoConfig,
    pub train: TrainConfig,
    pub synthesis: SynthesisConfig,
    pub stages: StageConfig,
    pub analysis: AnalysisConfig,
}

/// Sections whose `seed` is derived from the root seed unless set.
const SEEDED_SECTIONS: [&str; 6] = ["denoiser_train", "token", "todv", "mlco", "ilpo", "train"];

/// Seeds stay below 2^63 so they survive TOML's signed integers.
pub fn derived_seed(root: u64, name: &str) -> u64 {
    rng::sub_seed(root, name) >> 1
}

impl ExperimentConfig {
    /// Parses config text, applies a root-seed override and fills derived seeds.
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        if let Some(s) = seed_override {
            table.insert("seed".into(), toml::Value::Integer(to_toml_int(s)?));
        }
        let root = match table.get("seed") {
            None => 0,
            Some(toml::Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(other) => return Err(Error::Config(format!("seed must be a non-negative integer, got {other}"))),
        };
        for section in SEEDED_SECTIONS {
            let entry = table.entry(section).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(t) = entry else {
                return Err(Error::Config(format!("'{section}' must be a table")));
            };
            if !t.contains_key("seed") {
                t.insert("seed".into(), toml::Value::Integer(derived_seed(root, section) as i64));
            }
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults with derived seeds for `seed`.
    pub fn with_seed(seed: u64) -> Result<Self> {
        Self::parse("", Some(seed))
    }

    pub fn validate(&self) -> Result<()> {
        self.task.spec().validate()?;
        if self.task.train == 0 || self.task.validation == 0 || self.task.test == 0 {
            return Err(Error::Config("task split sizes must be positive".into()));
        }
        if !(self.synthesis.budget >= 0.0) || !self.synthesis.budget.is_finite() {
            return Err(Error::Config(format!("synthesis budget {} must be a finite value >= 0", self.synthesis.budget)));
        }
        if self.synthesis.scaling_budgets.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(Error::Config("scaling budgets must be positive".into()));
        }
        if self.synthesis.regimes.is_empty() {
            return Err(Error::Config("at least one training regime is required".into()));
        }
        if (self.stages.mlco || self.stages.ilpo) && !self.stages.todv {
            return Err(Error::Config("mlco and ilpo score samples with the TODV weight net; enable stages.todv".into()));
        }
        let sched = self.schedule.build()?;
        self.todv.validate()?;
        if self.stages.mlco {
            self.mlco.validate()?;
        }
        if self.stages.ilpo {
            self.ilpo.validate(&sched)?;
        }
        sched.subsequence(self.warmup.sampling_steps)?;
        sched.subsequence(self.ilpo.sampling_steps)?;
        if self.warmup.few_shot == 0 {
            return Err(Error::Config("warmup.few_shot must be positive".into()));
        }
        if self.analysis.probe_lambda < 0.0 {
            return Err(Error::Config("analysis.probe_lambda must be non-negative".into()));
        }
        Ok(())
    }

    /// Every resolved value, as TOML.
    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// SHA-256 of the resolved config, ignoring the output location.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(Self { out: PathBuf::new(), ..self.clone() }.resolved_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Synthetic samples per class for a budget multiplier.
    pub fn counts(&self, budget: f64) -> Vec<usize> {
        let per_class = (budget * self.task.train as f64 / self.task.num_classes as f64).round() as usize;
        vec![per_class; self.task.num_classes]
    }
}

fn to_toml_int(v: u64) -> Result<i64> {
    i64::try_from(v).map_err(|_| Error::Config(format!("seed {v} exceeds the TOML integer range")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_resolves_to_defaults_with_derived_seeds() {
        let c = ExperimentConfig::parse("", None).unwrap();
        assert_eq!(c.task, TaskConfig::default());
        assert_eq!(c.todv.seed, derived_seed(0, "todv"));
        assert_ne!(c.todv.seed, c.mlco.seed);
    }

    #[test]
    fn dotted_keys_and_tables_are_equivalent() {
        let a = ExperimentConfig::parse("todv.max_iters = 7\nseed = 3", None).unwrap();
        let b = ExperimentConfig::parse("seed = 3\n[todv]\nmax_iters = 7", None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.todv.max_iters, 7);
    }

    #[test]
    fn explicit_section_seed_is_kept() {
        let c = ExperimentConfig::parse("todv.seed = 11", None).unwrap();
        assert_eq!(c.todv.seed, 11);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::parse("todv.max_iter = 3", None), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("nonsense = 1", None), Err(Error::Config(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ExperimentConfig::parse("mlco.beta = 20.0\nsynthesis.budget = 3.0", Some(9)).unwrap();
        let back = ExperimentConfig::parse(&c.resolved_toml(), None).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
    }

    #[test]
    fn any_change_changes_the_hash() {
        let base = ExperimentConfig::parse("", None).unwrap();
        for text in ["seed = 1", "todv.meta_lr = 0.002", "stages.ilpo = false", "synthesis.budget = 2.0"] {
            assert_ne!(ExperimentConfig::parse(text, None).unwrap().hash(), base.hash(), "{text}");
        }
        assert_eq!(ExperimentConfig::parse("", None).unwrap().hash(), base.hash());
    }

    #[test]
    fn seed_override_wins() {
        let c = ExperimentConfig::parse("seed = 1", Some(5)).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.ilpo.seed, derived_seed(5, "ilpo"));
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "synthesis.budget = -1.0",
            "synthesis.regimes = []",
            "synthesis.regimes = [\"both\"]",
            "stages.todv = false",
            "task.primary_weight = 1.5",
            "mlco.rho = 0.7",
            "classifier.arch = \"resnet\"",
        ] {
            assert!(ExperimentConfig::parse(text, None).is_err(), "{text}");
        }
        assert!(ExperimentConfig::parse("stages.todv = false\nstages.mlco = false\nstages.ilpo = false", None).is_ok());
    }

    #[test]
    fn counts_follow_budget() {
        let c = ExperimentConfig::default();
        assert_eq!(c.counts(1.0), vec![250; 4]);
        assert_eq!(c.counts(0.0), vec![0; 4]);
        assert_eq!(c.counts(3.0), vec![750; 4]);
    }
}
