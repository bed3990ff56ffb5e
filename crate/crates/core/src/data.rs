//! Samples, datasets, mixture task factories and the dataset file format.
//!
//! A task is a set of classes, each a Gaussian mixture of *subpopulation
//! modes*. The training split mixes modes with the per-class training weights
//! while validation and test use the task's own validation composition, so two
//! tasks can share every mode and still prefer different subpopulations.
//!
//! File format (one header line, then one record per line):
//!
//! ```text
//! utilgen-dataset k=4 d=2 n=3 provenance=real
//! 0,1.25,-0.5
//! 3,0.1,2
//! 1,-3,0.75
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const HEADER_TAG: &str = "utilgen-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
    Validation,
    Test,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
            Provenance::Validation => "validation",
            Provenance::Test => "test",
        };
        f.write_str(s)
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Provenance::Real),
            "synthetic" => Ok(Provenance::Synthetic),
            "validation" => Ok(Provenance::Validation),
            "test" => Ok(Provenance::Test),
            other => Err(Error::Validation(format!("unknown provenance '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn empty(num_classes: usize, feature_dim: usize, provenance: Provenance) -> Self {
        Self { samples: Vec::new(), num_classes, feature_dim, provenance }
    }

    /// Builds a dataset and checks the shared-dimension and label-range invariants.
    pub fn new(
        samples: Vec<Sample>,
        num_classes: usize,
        feature_dim: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let ds = Self { samples, num_classes, feature_dim, provenance };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.features.len() != self.feature_dim {
                return Err(Error::Validation(format!(
                    "sample {i} has dimension {} (expected {})",
                    s.features.len(),
                    self.feature_dim
                )));
            }
            if s.label >= self.num_classes {
                return Err(Error::Range(format!(
                    "sample {i} has label {} but K = {}",
                    s.label, self.num_classes
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("sample {i} has non-finite features")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn restrict_to_class(&self, class: usize) -> LabeledDataset {
        let samples = self.samples.iter().filter(|s| s.label == class).cloned().collect();
        LabeledDataset { samples, ..self.clone_header() }
    }

    /// The first `per_class` samples of every class, in dataset order.
    pub fn few_shot(&self, per_class: usize) -> LabeledDataset {
        let mut counts = vec![0usize; self.num_classes];
        let mut samples = Vec::new();
        for s in &self.samples {
            if counts[s.label] < per_class {
                counts[s.label] += 1;
                samples.push(s.clone());
            }
        }
        LabeledDataset { samples, ..self.clone_header() }
    }

    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        if self.num_classes != other.num_classes || self.feature_dim != other.feature_dim {
            return Err(Error::Validation("cannot merge datasets with different K or D".into()));
        }
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Ok(LabeledDataset { samples, ..self.clone_header() })
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        LabeledDataset { samples, ..self.clone_header() }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    fn clone_header(&self) -> LabeledDataset {
        LabeledDataset::empty(self.num_classes, self.feature_dim, self.provenance)
    }

    /// Serialises to the text format. Floats use Rust's shortest round-trip
    /// representation, so `from_text(to_text(d)) == d` bit for bit.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{HEADER_TAG} k={} d={} n={} provenance={}\n",
            self.num_classes,
            self.feature_dim,
            self.samples.len(),
            self.provenance
        );
        for s in &self.samples {
            out.push_str(&s.label.to_string());
            for v in &s.features {
                out.push(',');
                out.push_str(&format!("{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<LabeledDataset> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Parse { record: 0, message: "empty file".into() })?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(HEADER_TAG) {
            return Err(Error::Parse { record: 0, message: "missing dataset header".into() });
        }
        let (mut k, mut d, mut n, mut prov) = (None, None, None, None);
        for field in fields {
            let (key, value) = field.split_once('=').ok_or_else(|| Error::Parse {
                record: 0,
                message: format!("malformed header field '{field}'"),
            })?;
            let bad = |_| Error::Parse { record: 0, message: format!("bad value for '{key}'") };
            match key {
                "k" => k = Some(value.parse::<usize>().map_err(bad)?),
                "d" => d = Some(value.parse::<usize>().map_err(bad)?),
                "n" => n = Some(value.parse::<usize>().map_err(bad)?),
                "provenance" => {
                    prov = Some(value.parse::<Provenance>().map_err(|e| Error::Parse {
                        record: 0,
                        message: e.to_string(),
                    })?)
                }
                _ => {}
            }
        }
        let missing = |what: &str| Error::Parse { record: 0, message: format!("header lacks '{what}'") };
        let k = k.ok_or_else(|| missing("k"))?;
        let d = d.ok_or_else(|| missing("d"))?;
        let n = n.ok_or_else(|| missing("n"))?;
        let prov = prov.ok_or_else(|| missing("provenance"))?;

        let mut samples = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let record = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let label = parts
                .next()
                .and_then(|v| v.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::Parse { record, message: "unreadable label".into() })?;
            let features = parts
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse { record, message: format!("unreadable feature: {e}") })?;
            if features.len() != d {
                return Err(Error::Parse {
                    record,
                    message: format!("expected {d} features, found {}", features.len()),
                });
            }
            if label >= k {
                return Err(Error::Parse { record, message: format!("label {label} >= K = {k}") });
            }
            samples.push(Sample { features, label });
        }
        if samples.len() != n {
            return Err(Error::Parse {
                record: samples.len() + 1,
                message: format!("expected {n} records, found {} (truncated file?)", samples.len()),
            });
        }
        Ok(LabeledDataset { samples, num_classes: k, feature_dim: d, provenance: prov })
    }
}

pub fn save_dataset(d: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(d.to_text().as_bytes())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    LabeledDataset::from_text(&fs::read_to_string(path)?)
}

/// One Gaussian subpopulation of a class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub mean: Vec<f64>,
    /// Isotropic standard deviation.
    pub scale: f64,
    /// Mixing weight within the class for the training split.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub num_classes: usize,
    /// `modes[c]` lists the subpopulations of class `c`.
    pub modes: Vec<Vec<Mode>>,
    /// `validation_weights[c][m]`: mixing weight of mode `m` of class `c` in
    /// the validation and test splits.
    pub validation_weights: Vec<Vec<f64>>,
    pub label_noise: f64,
}

const WEIGHT_TOL: f64 = 1e-9;

impl TaskSpec {
    pub fn feature_dim(&self) -> usize {
        self.modes.first().and_then(|m| m.first()).map_or(0, |m| m.mean.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.modes.len() != self.num_classes {
            return Err(Error::Validation("modes must list every class".into()));
        }
        if self.validation_weights.len() != self.num_classes {
            return Err(Error::Validation("validation composition must list every class".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Validation(format!("label noise {} outside [0,1]", self.label_noise)));
        }
        let d = self.feature_dim();
        if d == 0 {
            return Err(Error::Validation("feature dimension must be positive".into()));
        }
        for (c, modes) in self.modes.iter().enumerate() {
            if modes.is_empty() {
                return Err(Error::Validation(format!("class {c} has no modes")));
            }
            for m in modes {
                if m.mean.len() != d {
                    return Err(Error::Validation(format!("class {c} mode has wrong dimension")));
                }
                if !(m.scale > 0.0) {
                    return Err(Error::Validation(format!("class {c} mode has scale {} <= 0", m.scale)));
                }
                if m.weight < 0.0 {
                    return Err(Error::Validation(format!("class {c} mode has negative weight")));
                }
            }
            let total: f64 = modes.iter().map(|m| m.weight).sum();
            if (total - 1.0).abs() > WEIGHT_TOL {
                return Err(Error::Validation(format!(
                    "class {c} training weights sum to {total}, not 1"
                )));
            }
            let val = &self.validation_weights[c];
            if val.len() != modes.len() || val.iter().any(|w| *w < 0.0) {
                return Err(Error::Validation(format!("class {c} validation composition malformed")));
            }
            let total: f64 = val.iter().sum();
            if (total - 1.0).abs() > WEIGHT_TOL {
                return Err(Error::Validation(format!(
                    "class {c} validation weights sum to {total}, not 1"
                )));
            }
        }
        Ok(())
    }

    /// One isotropic mode per class, centred on a ring in the first two
    /// coordinates (remaining coordinates zero).
    pub fn ring(num_classes: usize, feature_dim: usize, radius: f64, scale: f64, label_noise: f64) -> Self {
        let modes = (0..num_classes)
            .map(|c| vec![Mode { mean: ring_point(feature_dim, radius, c as f64 / num_classes as f64), scale, weight: 1.0 }])
            .collect();
        Self { num_classes, modes, validation_weights: vec![vec![1.0]; num_classes], label_noise }
    }

    /// Two subpopulations per class with equal training weight. Mode 0 of
    /// class `c` sits on a ring at angle `2 pi c / K`; mode 1 sits at the
    /// angle of mode 0 of class `c + K/2`, rotated by `offset` (radians) and
    /// at radius `inner_radius`. Mode 1 therefore lies in territory that
    /// mode 0 of another class claims, and a task's validation composition
    /// (`primary_weight` on mode 0) decides which of the two to favour.
    pub fn two_subpopulation(
        num_classes: usize,
        feature_dim: usize,
        radius: f64,
        inner_radius: f64,
        offset: f64,
        scale: f64,
        primary_weight: f64,
        label_noise: f64,
    ) -> Self {
        let k = num_classes as f64;
        let modes = (0..num_classes)
            .map(|c| {
                let turn = c as f64 / k;
                let opposite = ((c + num_classes / 2) % num_classes) as f64 / k + offset / std::f64::consts::TAU;
                vec![
                    Mode { mean: ring_point(feature_dim, radius, turn), scale, weight: 0.5 },
                    Mode { mean: ring_point(feature_dim, inner_radius, opposite), scale, weight: 0.5 },
                ]
            })
            .collect();
        Self {
            num_classes,
            modes,
            validation_weights: vec![vec![primary_weight, 1.0 - primary_weight]; num_classes],
            label_noise,
        }
    }

    /// Index of the mode of `class` whose mean is closest to `x`.
    pub fn nearest_mode(&self, class: usize, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (m, mode) in self.modes[class].iter().enumerate() {
            let d2: f64 = mode.mean.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (m, d2);
            }
        }
        best.0
    }

    /// Fraction of each class's samples nearest to each of its modes
    /// (`result[c][m]`). Classes without samples get all zeros.
    pub fn mode_membership(&self, data: &LabeledDataset) -> Vec<Vec<f64>> {
        let mut counts: Vec<Vec<f64>> = self.modes.iter().map(|m| vec![0.0; m.len()]).collect();
        for s in &data.samples {
            counts[s.label][self.nearest_mode(s.label, &s.features)] += 1.0;
        }
        for row in &mut counts {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
        counts
    }

    /// Mean over classes of the membership mass a dataset puts on mode `m`.
    pub fn mean_mode_mass(&self, data: &LabeledDataset, m: usize) -> f64 {
        let membership = self.mode_membership(data);
        membership.iter().map(|row| row.get(m).copied().unwrap_or(0.0)).sum::<f64>()
            / self.num_classes as f64
    }
}

fn ring_point(feature_dim: usize, radius: f64, turn: f64) -> Vec<f64> {
    let mut v = vec![0.0; feature_dim];
    let a = std::f64::consts::TAU * turn;
    v[0] = radius * a.cos();
    if feature_dim > 1 {
        v[1] = radius * a.sin();
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { train: 1000, validation: 200, test: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitBundle {
    pub real_train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
    pub synthetic: Option<LabeledDataset>,
    /// Indices into `real_train` whose labels were flipped.
    pub flipped: Vec<usize>,
    /// Labels of `real_train` before corruption.
    pub clean_labels: Vec<usize>,
}

impl SplitBundle {
    pub fn is_flipped_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.real_train.len()];
        for &i in &self.flipped {
            mask[i] = true;
        }
        mask
    }
}

fn draw_split(
    spec: &TaskSpec,
    n: usize,
    composition: &[Vec<f64>],
    rng: &mut rng::Rng,
    provenance: Provenance,
) -> LabeledDataset {
    let d = spec.feature_dim();
    let k = spec.num_classes;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        // Classes are balanced: sample i belongs to class i mod K.
        let class = i % k;
        let u: f64 = rng.random();
        let weights = &composition[class];
        let mut acc = 0.0;
        let mut mode_idx = weights.len() - 1;
        for (m, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                mode_idx = m;
                break;
            }
        }
        let mode = &spec.modes[class][mode_idx];
        let noise = rng::normal_vec(rng, d);
        let features = mode.mean.iter().zip(&noise).map(|(mu, z)| mu + mode.scale * z).collect();
        samples.push(Sample { features, label: class });
    }
    LabeledDataset { samples, num_classes: k, feature_dim: d, provenance }
}

/// Draws train/validation/test splits for a task.
///
/// Each split uses its own sub-seed (`"split/train"`, `"split/validation"`,
/// `"split/test"`, `"split/train/noise"`), so split sizes never influence
/// each other and noiseless regeneration reproduces the same features.
pub fn make_synthetic_task(spec: &TaskSpec, sizes: SplitSizes, seed: u64) -> Result<SplitBundle> {
    spec.validate()?;
    if sizes.train == 0 || sizes.validation == 0 || sizes.test == 0 {
        return Err(Error::Validation("split sizes must be positive".into()));
    }
    let train_weights: Vec<Vec<f64>> =
        spec.modes.iter().map(|ms| ms.iter().map(|m| m.weight).collect()).collect();

    let mut real_train = draw_split(
        spec,
        sizes.train,
        &train_weights,
        &mut rng::stream(seed, "split/train"),
        Provenance::Real,
    );
    let validation = draw_split(
        spec,
        sizes.validation,
        &spec.validation_weights,
        &mut rng::stream(seed, "split/validation"),
        Provenance::Validation,
    );
    let test = draw_split(
        spec,
        sizes.test,
        &spec.validation_weights,
        &mut rng::stream(seed, "split/test"),
        Provenance::Test,
    );

    let clean_labels = real_train.labels();
    let mut flipped = Vec::new();
    if spec.label_noise > 0.0 && spec.num_classes > 1 {
        let mut noise_rng = rng::stream(seed, "split/train/noise");
        for (i, s) in real_train.samples.iter_mut().enumerate() {
            if noise_rng.random::<f64>() < spec.label_noise {
                let shift = noise_rng.random_range(1..spec.num_classes);
                s.label = (s.label + shift) % spec.num_classes;
                flipped.push(i);
            }
        }
    }

    Ok(SplitBundle { real_train, validation, test, synthetic: None, flipped, clean_labels })
}

/// Shuffled copy of a dataset (used by order-invariance checks and batching).
pub fn shuffled(data: &LabeledDataset, rng: &mut rng::Rng) -> LabeledDataset {
    let mut out = data.clone();
    out.samples.shuffle(rng);
    out
}
