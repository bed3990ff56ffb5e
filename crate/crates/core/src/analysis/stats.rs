use log::warn;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierState;
use crate::data::LabeledDataset;
use crate::error::Result;
use crate::mlco::score_samples;
use crate::todv::WeightNetParams;

/// Equal-width bins over `[lo, hi]`; the last bin is closed on the right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn with_range(values: &[f64], bins: usize, lo: f64, hi: f64) -> Self {
        let bins = bins.max(1);
        let mut counts = vec![0; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let b = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
            counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Self { lo, hi, counts }
    }

    /// Range taken from the data.
    pub fn auto(values: &[f64], bins: usize) -> Self {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() {
            return Self::with_range(values, bins, 0.0, 1.0);
        }
        Self::with_range(values, bins, lo, hi)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Ranks with ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal-length inputs");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// `None` for classes with fewer than two samples.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    1.0 - c.clamp(-1.0, 1.0)
}

/// Mean pairwise cosine distance of classifier features within each class,
/// averaged over classes with at least two samples.
pub fn intra_class_diversity(data: &LabeledDataset, classifier: &ClassifierState) -> DiversityReport {
    diversity_of(data, |x| classifier.features(x))
}

pub(crate) fn diversity_of(data: &LabeledDataset, feat: impl Fn(&[f64]) -> Vec<f64>) -> DiversityReport {
    let per_class: Vec<Option<f64>> = (0..data.num_classes)
        .map(|c| {
            let f: Vec<Vec<f64>> = data.class_indices(c).iter().map(|&i| feat(&data.samples[i].features)).collect();
            if f.len() < 2 {
                warn!("class {c} has {} samples; excluded from diversity", f.len());
                return None;
            }
            let mut s = 0.0;
            let mut n = 0usize;
            for i in 0..f.len() {
                for j in (i + 1)..f.len() {
                    s += cosine_distance(&f[i], &f[j]);
                    n += 1;
                }
            }
            Some(s / n as f64)
        })
        .collect();
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if scored.is_empty() { 0.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 };
    DiversityReport { per_class, mean }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightDistribution {
    pub histogram: Histogram,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
}

impl WeightDistribution {
    pub fn from_weights(w: &[f64], bins: usize) -> Self {
        let n = w.len().max(1) as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut s = w.to_vec();
        s.sort_by(f64::total_cmp);
        let median = match s.len() {
            0 => 0.0,
            l if l % 2 == 1 => s[l / 2],
            l => 0.5 * (s[l / 2 - 1] + s[l / 2]),
        };
        Self {
            histogram: Histogram::with_range(w, bins, 0.0, 1.0),
            mean,
            std,
            min: s.first().copied().unwrap_or(0.0),
            max: s.last().copied().unwrap_or(0.0),
            median,
        }
    }
}

pub const WEIGHT_BINS: usize = 20;

/// Utility-weight distribution of each dataset on `[0, 1]`.
pub fn weight_histogram(
    phi: &WeightNetParams,
    classifier: &ClassifierState,
    datasets: &[&LabeledDataset],
) -> Result<Vec<WeightDistribution>> {
    datasets
        .iter()
        .map(|d| Ok(WeightDistribution::from_weights(&score_samples(phi, classifier, d)?, WEIGHT_BINS)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Architecture;
    use crate::data::{Provenance, Sample};
    use proptest::prelude::*;

    fn ds(points: Vec<(Vec<f64>, usize)>, k: usize) -> LabeledDataset {
        let d = points[0].0.len();
        LabeledDataset::new(points.into_iter().map(|(f, l)| Sample::new(f, l)).collect(), k, d, Provenance::Synthetic)
            .unwrap()
    }

    #[test]
    fn spearman_brute_force() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // d = (1, -1, 0, 0): 1 - 6*2/(4*15)
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 3.0, 4.0]) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn identical_class_has_zero_diversity() {
        let d = ds(vec![(vec![1.0, 2.0], 0), (vec![1.0, 2.0], 0), (vec![1.0, 2.0], 0)], 1);
        assert!(diversity_of(&d, |x| x.to_vec()).mean.abs() < 1e-12);
    }

    #[test]
    fn orthogonal_pair_has_unit_diversity() {
        let d = ds(vec![(vec![1.0, 0.0], 0), (vec![0.0, 3.0], 0)], 1);
        assert!((diversity_of(&d, |x| x.to_vec()).mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_class_is_excluded() {
        let d = ds(vec![(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 0), (vec![1.0, 1.0], 1)], 2);
        let r = diversity_of(&d, |x| x.to_vec());
        assert_eq!(r.per_class[1], None);
        assert!((r.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classifier_diversity_runs() {
        let d = ds(vec![(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 0)], 1);
        let c = ClassifierState::new(Architecture { hidden: 8 }, 2, 1, 0);
        let r = intra_class_diversity(&d, &c);
        assert!((0.0..=2.0).contains(&r.mean));
    }

    #[test]
    fn weight_histograms_of_identical_sets_match() {
        let d = ds((0..30).map(|i| (vec![(i as f64).sin(), (i as f64).cos()], i % 2)).collect(), 2);
        let c = ClassifierState::new(Architecture { hidden: 8 }, 2, 2, 1);
        let phi = WeightNetParams::new(10, 3);
        let h = weight_histogram(&phi, &c, &[&d, &d.clone()]).unwrap();
        assert_eq!(h[0], h[1]);
        assert_eq!(h[0].histogram.total(), 30);
        assert!(h[0].min <= h[0].median && h[0].median <= h[0].max);
    }

    proptest! {
        #[test]
        fn diversity_is_scale_invariant_and_bounded(
            pts in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 3), 0usize..2), 4..12),
            scales in prop::collection::vec(0.1f64..10.0, 12),
        ) {
            prop_assume!(pts.iter().all(|(f, _)| f.iter().map(|v| v * v).sum::<f64>() > 1e-6));
            let d = ds(pts.clone(), 2);
            let scaled = ds(pts.iter().zip(&scales).map(|((f, l), s)| (f.iter().map(|v| v * s).collect(), *l)).collect(), 2);
            let a = diversity_of(&d, |x| x.to_vec());
            let b = diversity_of(&scaled, |x| x.to_vec());
            prop_assert!((a.mean - b.mean).abs() < 1e-9);
            prop_assert!((0.0..=2.0 + 1e-12).contains(&a.mean));
        }

        #[test]
        fn histogram_counts_sum_to_size(v in prop::collection::vec(-3.0f64..3.0, 0..50)) {
            prop_assert_eq!(Histogram::auto(&v, 20).total(), v.len());
        }
    }
}
