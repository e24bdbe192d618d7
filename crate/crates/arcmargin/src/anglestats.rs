//! Post-hoc diagnostics: angle statistics between learned centres, empirical
//! centres and embeddings; pair-angle histograms; threshold-sweep
//! verification accuracy.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hypersphere::{
    angle_from_dot, normalize_columns, vdot, CentreMatrix, EmbeddingBatch,
};

/// Per-class circular mean directions: the normalised mean of each class's
/// normalised embeddings, as a d x n centre matrix.
pub fn class_centres(
    embeddings: &EmbeddingBatch,
    labels: &[usize],
    n_classes: usize,
) -> Result<CentreMatrix> {
    assert_eq!(embeddings.len(), labels.len(), "one label per embedding");
    assert!(n_classes >= 2);
    let d = embeddings.dim();
    let mut sums = Array2::zeros((d, n_classes));
    let mut counts = vec![0usize; n_classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= n_classes {
            return Err(Error::LabelOutOfRange { label, classes: n_classes });
        }
        counts[label] += 1;
        for a in 0..d {
            sums[(a, label)] += embeddings.row(i)[a];
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::EmptyClass { class: c });
        }
    }
    normalize_columns(&sums).map_err(|e| match e {
        // A class whose directions cancel has no mean direction.
        Error::ZeroVector { index } => Error::ZeroVector { index },
        other => other,
    })
}

/// The angle-statistic bundle, degrees.
///
/// `w_ec` and `w_inter` need a learned centre matrix and are absent for
/// models trained without one (triplet-only).
#[derive(Debug, Clone, PartialEq)]
pub struct AngleReport {
    /// Mean angle between each learned centre and its empirical centre.
    pub w_ec: Option<f64>,
    /// Mean over learned centres of the minimum angle to another one.
    pub w_inter: Option<f64>,
    /// Mean angle between each sample and its class's empirical centre.
    pub intra: f64,
    /// Mean over empirical centres of the minimum angle to another one.
    pub inter: f64,
}

/// Computes the report for embeddings with labels, against an optional
/// learned centre matrix.
pub fn angle_report(
    embeddings: &EmbeddingBatch,
    labels: &[usize],
    learned: Option<&CentreMatrix>,
    n_classes: usize,
) -> Result<AngleReport> {
    let empirical = class_centres(embeddings, labels, n_classes)?;

    let intra = {
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            total += angle_from_dot(vdot(embeddings.row(i), empirical.col(label)));
        }
        (total / labels.len() as f64).to_degrees()
    };

    let inter = mean_min_angle(&empirical).to_degrees();

    let (w_ec, w_inter) = match learned {
        Some(centres) => {
            if centres.dim() != empirical.dim() {
                return Err(Error::DimensionMismatch {
                    left: centres.dim(),
                    right: empirical.dim(),
                });
            }
            if centres.classes() != n_classes {
                return Err(Error::DimensionMismatch {
                    left: centres.classes(),
                    right: n_classes,
                });
            }
            let mut total = 0.0;
            for j in 0..n_classes {
                total += angle_from_dot(vdot(centres.col(j), empirical.col(j)));
            }
            (
                Some((total / n_classes as f64).to_degrees()),
                Some(mean_min_angle(centres).to_degrees()),
            )
        }
        None => (None, None),
    };

    Ok(AngleReport { w_ec, w_inter, intra, inter })
}

/// Mean over columns of the minimum angle to any other column, radians.
fn mean_min_angle(centres: &CentreMatrix) -> f64 {
    let n = centres.classes();
    let mut total = 0.0;
    for j in 0..n {
        let mut max_dot = f64::NEG_INFINITY;
        for k in 0..n {
            if k == j {
                continue;
            }
            let d = vdot(centres.col(j), centres.col(k));
            if d > max_dot {
                max_dot = d;
            }
        }
        total += angle_from_dot(max_dot);
    }
    total / n as f64
}

/// A pair of embedding indices with its angle in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub angle_deg: f64,
}

/// All intra-class pairs (positives) and a seeded sample of inter-class
/// pairs (negatives).
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub positives: Vec<Pair>,
    pub negatives: Vec<Pair>,
}

impl PairSet {
    /// Enumerates every same-class pair and samples up to `n_neg`
    /// different-class pairs uniformly (with replacement over the pair
    /// space, deduplicated), deterministically from `seed`.
    pub fn build(
        embeddings: &EmbeddingBatch,
        labels: &[usize],
        n_neg: usize,
        seed: u64,
    ) -> Result<PairSet> {
        let n = embeddings.len();
        assert_eq!(labels.len(), n, "one label per embedding");
        let mut positives = Vec::new();
        let mut total_neg_pairs = 0usize;
        for i in 0..n {
            for j in (i + 1)..n {
                if labels[i] == labels[j] {
                    positives.push(Pair {
                        i,
                        j,
                        angle_deg: pair_angle_deg(embeddings, i, j),
                    });
                } else {
                    total_neg_pairs += 1;
                }
            }
        }
        if positives.is_empty() {
            return Err(Error::NoPositivePairs);
        }

        let mut negatives = Vec::new();
        let want = n_neg.min(total_neg_pairs);
        if want == total_neg_pairs {
            for i in 0..n {
                for j in (i + 1)..n {
                    if labels[i] != labels[j] {
                        negatives.push(Pair {
                            i,
                            j,
                            angle_deg: pair_angle_deg(embeddings, i, j),
                        });
                    }
                }
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut seen = std::collections::HashSet::new();
            while negatives.len() < want {
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                if i == j || labels[i] == labels[j] {
                    continue;
                }
                let key = (i.min(j), i.max(j));
                if seen.insert(key) {
                    negatives.push(Pair {
                        i: key.0,
                        j: key.1,
                        angle_deg: pair_angle_deg(embeddings, key.0, key.1),
                    });
                }
            }
        }
        Ok(PairSet { positives, negatives })
    }

    /// Default negative-sample budget: min(all, 5x positives).
    pub fn default_negative_budget(positive_count: usize) -> usize {
        positive_count.saturating_mul(5)
    }
}

fn pair_angle_deg(embeddings: &EmbeddingBatch, i: usize, j: usize) -> f64 {
    angle_from_dot(vdot(embeddings.row(i), embeddings.row(j))).to_degrees()
}

/// Histogram of positive and negative pair angles over fixed-width degree
/// bins spanning [0, 180].
#[derive(Debug, Clone, PartialEq)]
pub struct PairHistogram {
    pub bin_width_deg: f64,
    pub positive: Vec<u64>,
    pub negative: Vec<u64>,
}

impl PairHistogram {
    /// Fraction of probability mass shared between the normalised positive
    /// and negative histograms (1 = identical, 0 = disjoint).
    pub fn overlap_mass(&self) -> f64 {
        let pt: u64 = self.positive.iter().sum();
        let nt: u64 = self.negative.iter().sum();
        if pt == 0 || nt == 0 {
            return 0.0;
        }
        self.positive
            .iter()
            .zip(self.negative.iter())
            .map(|(&p, &q)| (p as f64 / pt as f64).min(q as f64 / nt as f64))
            .sum()
    }
}

/// Builds the pair set and bins it.
pub fn pair_histogram(
    embeddings: &EmbeddingBatch,
    labels: &[usize],
    n_neg: usize,
    seed: u64,
    bins: usize,
) -> Result<(PairSet, PairHistogram)> {
    assert!(bins >= 1);
    let pairs = PairSet::build(embeddings, labels, n_neg, seed)?;
    let hist = histogram_pairs(&pairs, bins);
    Ok((pairs, hist))
}

pub fn histogram_pairs(pairs: &PairSet, bins: usize) -> PairHistogram {
    let bin_width = 180.0 / bins as f64;
    let mut positive = vec![0u64; bins];
    let mut negative = vec![0u64; bins];
    for p in &pairs.positives {
        positive[bin_index(p.angle_deg, bin_width, bins)] += 1;
    }
    for p in &pairs.negatives {
        negative[bin_index(p.angle_deg, bin_width, bins)] += 1;
    }
    PairHistogram { bin_width_deg: bin_width, positive, negative }
}

fn bin_index(angle_deg: f64, bin_width: f64, bins: usize) -> usize {
    ((angle_deg / bin_width) as usize).min(bins - 1)
}

/// Best threshold-classification accuracy over pair angles: a pair is
/// called same-identity when its angle is strictly below the threshold.
///
/// Candidate thresholds are the midpoints between adjacent distinct sorted
/// angles plus one candidate below and above all of them, so the degenerate
/// everything-same / everything-different calls are reachable. Ties go to
/// the smallest threshold. Returns (accuracy, threshold degrees).
pub fn verification_accuracy(pairs: &PairSet) -> Result<(f64, f64)> {
    if pairs.positives.is_empty() || pairs.negatives.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    let mut angles: Vec<f64> = pairs
        .positives
        .iter()
        .chain(pairs.negatives.iter())
        .map(|p| p.angle_deg)
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    angles.dedup();

    let mut candidates = Vec::with_capacity(angles.len() + 1);
    candidates.push(angles[0] - 1.0);
    for w in angles.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    candidates.push(angles[angles.len() - 1] + 1.0);

    let total = (pairs.positives.len() + pairs.negatives.len()) as f64;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &threshold in &candidates {
        let hits = pairs
            .positives
            .iter()
            .filter(|p| p.angle_deg < threshold)
            .count()
            + pairs
                .negatives
                .iter()
                .filter(|p| p.angle_deg >= threshold)
                .count();
        let acc = hits as f64 / total;
        if acc > best.0 {
            best = (acc, threshold);
        }
    }
    Ok(best)
}
