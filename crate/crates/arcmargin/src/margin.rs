//! The unified angular-margin loss family: target-logit transforms, the full
//! forward loss, analytic gradients with respect to raw features and centres,
//! auxiliary intra/inter/triplet penalties and binary decision boundaries.
//!
//! The ground-truth logit transform is `cos(m1*theta + m2) - m3`. Once
//! `m1*theta + m2` passes pi the cosine turns back up, so that region uses a
//! monotone fallback that is linear in cos(theta):
//! `cos(theta) - m2*sin(m2) - m3`, whose derivative in cos(theta) is 1.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::hypersphere::{
    angle_from_dot, normalize_columns, normalize_rows, vdot, CentreMatrix, EmbeddingBatch,
    UnitVector,
};

/// Floor for sin(theta) in the arccos chain rule; the singularity at
/// theta in {0, pi} is an artifact of the angle parametrisation.
pub const SIN_FLOOR: f64 = 1e-7;

/// Hyper-parameters (m1, m2, m3, s) of the combined margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginSpec {
    /// Multiplicative angular margin.
    pub m1: f64,
    /// Additive angular margin, radians.
    pub m2: f64,
    /// Additive cosine margin.
    pub m3: f64,
    /// Feature scale.
    pub s: f64,
}

impl MarginSpec {
    pub fn new(m1: f64, m2: f64, m3: f64, s: f64) -> Result<Self> {
        if !(m1 >= 0.0 && (0.0..std::f64::consts::PI).contains(&m2) && m3 >= 0.0 && s > 0.0) {
            return Err(Error::NonFiniteInput);
        }
        Ok(MarginSpec { m1, m2, m3, s })
    }

    /// The no-margin baseline (normalised softmax).
    pub fn normalized_softmax(s: f64) -> Self {
        MarginSpec { m1: 1.0, m2: 0.0, m3: 0.0, s }
    }

    pub fn is_identity_margin(&self) -> bool {
        self.m1 == 1.0 && self.m2 == 0.0 && self.m3 == 0.0
    }
}

/// Named margin settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Softmax,
    SphereFace,
    ArcFace,
    CosFace,
    Cm1,
    Cm2,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Softmax,
        Preset::SphereFace,
        Preset::ArcFace,
        Preset::CosFace,
        Preset::Cm1,
        Preset::Cm2,
    ];

    pub fn spec(self) -> MarginSpec {
        let (m1, m2, m3) = match self {
            Preset::Softmax => (1.0, 0.0, 0.0),
            Preset::SphereFace => (1.35, 0.0, 0.0),
            Preset::ArcFace => (1.0, 0.5, 0.0),
            Preset::CosFace => (1.0, 0.0, 0.35),
            Preset::Cm1 => (1.0, 0.3, 0.2),
            Preset::Cm2 => (0.9, 0.4, 0.15),
        };
        MarginSpec { m1, m2, m3, s: 64.0 }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Softmax => "softmax",
            Preset::SphereFace => "sphereface",
            Preset::ArcFace => "arcface",
            Preset::CosFace => "cosface",
            Preset::Cm1 => "cm1",
            Preset::Cm2 => "cm2",
        }
    }

    pub fn from_name(name: &str) -> Option<Preset> {
        Preset::ALL.iter().copied().find(|p| p.name() == name)
    }
}

/// Transformed ground-truth logit at angle `theta`.
pub fn target_logit(theta: f64, spec: &MarginSpec) -> Result<f64> {
    if !(0.0..=std::f64::consts::PI).contains(&theta) {
        return Err(Error::ThetaOutOfRange { theta });
    }
    Ok(psi_from_theta(theta, spec).0)
}

/// (psi, d psi / d cos(theta)) at `theta`.
fn psi_from_theta(theta: f64, spec: &MarginSpec) -> (f64, f64) {
    let a = spec.m1 * theta + spec.m2;
    if a <= std::f64::consts::PI {
        let psi = a.cos() - spec.m3;
        let dpsi = spec.m1 * a.sin() / theta.sin().max(SIN_FLOOR);
        (psi, dpsi)
    } else {
        let psi = theta.cos() - spec.m2 * spec.m2.sin() - spec.m3;
        (psi, 1.0)
    }
}

/// Evaluates the target logit over a grid of angles, returning
/// (degrees, logit) pairs.
pub fn target_logit_curve(spec: &MarginSpec, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    grid.iter()
        .map(|&theta| Ok((theta.to_degrees(), target_logit(theta, spec)?)))
        .collect()
}

/// Default curve grid, 20 to 100 degrees inclusive.
pub fn default_curve_grid(step_deg: f64) -> Vec<f64> {
    let mut grid = Vec::new();
    let mut deg = 20.0;
    while deg <= 100.0 + 1e-9 {
        grid.push(deg.to_radians());
        deg += step_deg;
    }
    grid
}

/// Processing stage of a block of class scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitStage {
    /// Raw cosines, entries in [-1, 1].
    PreScale,
    /// Margin applied and multiplied by s.
    PostScale,
}

/// N x n class-score matrix with its processing stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBlock {
    values: Array2<f64>,
    stage: LogitStage,
}

impl LogitBlock {
    /// Wraps a matrix of raw cosines.
    pub fn pre_scale(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-9) {
            return Err(Error::NonFiniteInput);
        }
        Ok(LogitBlock { values, stage: LogitStage::PreScale })
    }

    pub fn post_scale(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(LogitBlock { values, stage: LogitStage::PostScale })
    }

    pub fn stage(&self) -> LogitStage {
        self.stage
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Applies the margin to each sample's ground-truth column and scales all
/// scores by s.
pub fn margin_forward(
    cosines: &LogitBlock,
    labels: &[usize],
    spec: &MarginSpec,
) -> Result<LogitBlock> {
    assert_eq!(
        cosines.stage(),
        LogitStage::PreScale,
        "margin_forward expects pre-scale cosines"
    );
    let (batch, classes) = (cosines.values.nrows(), cosines.values.ncols());
    assert_eq!(labels.len(), batch, "one label per row");
    let mut scores = cosines.values.clone();
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let theta = angle_from_dot(scores[(i, label)]);
        scores[(i, label)] = psi_from_theta(theta, spec).0;
    }
    scores.mapv_inplace(|v| v * spec.s);
    LogitBlock::post_scale(scores)
}

/// Mean cross entropy of row-wise softmax against the labels, with the
/// per-sample gradient of the mean loss with respect to the scores.
pub fn softmax_xent(scores: &LogitBlock, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let z = &scores.values;
    let (batch, classes) = (z.nrows(), z.ncols());
    assert_eq!(labels.len(), batch, "one label per row");
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let mut grad = Array2::zeros((batch, classes));
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = z.row(i);
        let mut max = f64::NEG_INFINITY;
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for &v in row.iter() {
            sum += (v - max).exp();
        }
        loss += sum.ln() - (row[label] - max);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / sum;
            grad[(i, j)] = (p - if j == label { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok((loss / batch as f64, grad))
}

/// Loss value and gradients with respect to the raw inputs.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// N x d, same layout as the raw feature matrix.
    pub grad_features: Array2<f64>,
    /// d x n, same layout as the raw centre matrix.
    pub grad_centres: Array2<f64>,
}

/// Margin softmax loss on raw (unnormalised) features and centres.
///
/// Composes row/column normalisation, the cosine matrix, the margin
/// transform on the ground-truth column and softmax cross entropy, then
/// chains the analytic derivatives back through all of it.
pub fn combined_loss(
    features_raw: &Array2<f64>,
    centres_raw: &Array2<f64>,
    labels: &[usize],
    spec: &MarginSpec,
) -> Result<LossOutput> {
    let batch = features_raw.nrows();
    let classes = centres_raw.ncols();
    assert_eq!(labels.len(), batch, "one label per row");
    if features_raw.ncols() != centres_raw.nrows() {
        return Err(Error::DimensionMismatch {
            left: features_raw.ncols(),
            right: centres_raw.nrows(),
        });
    }
    for &label in labels {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
    }

    let feats = normalize_rows(features_raw)?;
    let centres = normalize_columns(centres_raw)?;

    let (loss, grad_unit_feats, grad_unit_centres) =
        margin_loss_on_unit(&feats, &centres, labels, spec)?;

    let grad_features = chain_row_normalization(features_raw, feats.rows(), &grad_unit_feats);
    let grad_centres = chain_col_normalization(centres_raw, centres.cols(), &grad_unit_centres);
    Ok(LossOutput { loss, grad_features, grad_centres })
}

/// Same loss on already-normalised inputs; gradients are with respect to the
/// unit vectors.
pub(crate) fn margin_loss_on_unit(
    feats: &EmbeddingBatch,
    centres: &CentreMatrix,
    labels: &[usize],
    spec: &MarginSpec,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let batch = feats.len();
    let classes = centres.classes();

    // Cosines, clamped; the margin transform on the ground-truth column.
    let mut cosines = Array2::zeros((batch, classes));
    for i in 0..batch {
        for j in 0..classes {
            cosines[(i, j)] = vdot(feats.row(i), centres.col(j));
        }
    }
    let mut dpsi = vec![1.0f64; batch];
    let mut scores = Array2::zeros((batch, classes));
    for i in 0..batch {
        for j in 0..classes {
            let c = cosines[(i, j)];
            let clamped = c.clamp(-1.0, 1.0);
            let v = if j == labels[i] {
                let (psi, dp) = psi_from_theta(clamped.acos(), spec);
                // Gradient is defined as zero where the clamp is active.
                dpsi[i] = if c.abs() > 1.0 { 0.0 } else { dp };
                psi
            } else {
                clamped
            };
            scores[(i, j)] = v * spec.s;
        }
    }

    let block = LogitBlock { values: scores, stage: LogitStage::PostScale };
    let (loss, grad_scores) = softmax_xent(&block, labels)?;

    // d loss / d cosine.
    let mut grad_cos = grad_scores;
    for i in 0..batch {
        for j in 0..classes {
            let mut g = grad_cos[(i, j)] * spec.s;
            if j == labels[i] {
                g *= dpsi[i];
            } else if cosines[(i, j)].abs() > 1.0 {
                g = 0.0;
            }
            grad_cos[(i, j)] = g;
        }
    }

    // d loss / d unit vectors.
    let d = feats.dim();
    let mut grad_u = Array2::zeros((batch, d));
    let mut grad_v = Array2::zeros((d, classes));
    for i in 0..batch {
        for j in 0..classes {
            let g = grad_cos[(i, j)];
            if g == 0.0 {
                continue;
            }
            for a in 0..d {
                grad_u[(i, a)] += g * centres.col(j)[a];
            }
        }
    }
    for j in 0..classes {
        for i in 0..batch {
            let g = grad_cos[(i, j)];
            if g == 0.0 {
                continue;
            }
            for a in 0..d {
                grad_v[(a, j)] += g * feats.row(i)[a];
            }
        }
    }
    Ok((loss, grad_u, grad_v))
}

/// Chains d loss / d unit-row back to the raw rows: for x with u = x/|x|,
/// dx = (du - (du . u) u) / |x|.
pub(crate) fn chain_row_normalization(
    raw: &Array2<f64>,
    unit: &Array2<f64>,
    grad_unit: &Array2<f64>,
) -> Array2<f64> {
    let mut out = Array2::zeros(raw.dim());
    for i in 0..raw.nrows() {
        let norm = vdot(raw.row(i), raw.row(i)).sqrt();
        let proj = vdot(grad_unit.row(i), unit.row(i));
        for a in 0..raw.ncols() {
            out[(i, a)] = (grad_unit[(i, a)] - proj * unit[(i, a)]) / norm;
        }
    }
    out
}

pub(crate) fn chain_col_normalization(
    raw: &Array2<f64>,
    unit: &Array2<f64>,
    grad_unit: &Array2<f64>,
) -> Array2<f64> {
    let mut out = Array2::zeros(raw.dim());
    for j in 0..raw.ncols() {
        let norm = vdot(raw.column(j), raw.column(j)).sqrt();
        let proj = vdot(grad_unit.column(j), unit.column(j));
        for a in 0..raw.nrows() {
            out[(a, j)] = (grad_unit[(a, j)] - proj * unit[(a, j)]) / norm;
        }
    }
    out
}

/// Mean ground-truth angle penalty `(1/(pi N)) sum_i theta_{y_i}` on
/// normalised inputs, with gradients with respect to those inputs.
pub fn intra_penalty(
    feats: &EmbeddingBatch,
    centres: &CentreMatrix,
    labels: &[usize],
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let batch = feats.len();
    let d = feats.dim();
    assert_eq!(labels.len(), batch, "one label per row");
    let mut total = 0.0;
    let mut grad_u = Array2::zeros((batch, d));
    let mut grad_v = Array2::zeros((d, centres.classes()));
    let coef = 1.0 / (std::f64::consts::PI * batch as f64);
    for (i, &label) in labels.iter().enumerate() {
        if label >= centres.classes() {
            return Err(Error::LabelOutOfRange { label, classes: centres.classes() });
        }
        let t = vdot(feats.row(i), centres.col(label));
        let clamped = t.clamp(-1.0, 1.0);
        total += clamped.acos();
        if t.abs() > 1.0 {
            continue;
        }
        // d arccos(t)/dt = -1/sin(theta)
        let dacos = -1.0 / (1.0 - clamped * clamped).sqrt().max(SIN_FLOOR);
        for a in 0..d {
            grad_u[(i, a)] += coef * dacos * centres.col(label)[a];
            grad_v[(a, label)] += coef * dacos * feats.row(i)[a];
        }
    }
    Ok((coef * total, grad_u, grad_v))
}

/// Centre-spreading penalty
/// `-(1/(pi N (n-1))) sum_i sum_{j != y_i} arccos(W_{y_i} . W_j)` on
/// normalised centres, with gradients with respect to the centres.
pub fn inter_penalty(
    centres: &CentreMatrix,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let classes = centres.classes();
    let d = centres.dim();
    let batch = labels.len();
    assert!(batch >= 1, "need at least one label");
    let mut total = 0.0;
    let mut grad_v = Array2::zeros((d, classes));
    let coef = -1.0 / (std::f64::consts::PI * batch as f64 * (classes as f64 - 1.0));
    for &label in labels {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        for j in 0..classes {
            if j == label {
                continue;
            }
            let t = vdot(centres.col(label), centres.col(j));
            let clamped = t.clamp(-1.0, 1.0);
            total += clamped.acos();
            if t.abs() > 1.0 {
                continue;
            }
            let dacos = -1.0 / (1.0 - clamped * clamped).sqrt().max(SIN_FLOOR);
            for a in 0..d {
                grad_v[(a, label)] += coef * dacos * centres.col(j)[a];
                grad_v[(a, j)] += coef * dacos * centres.col(label)[a];
            }
        }
    }
    Ok((coef * total, grad_v))
}

/// Angular triplet hinge `max(0, theta_pos + m - theta_neg)` with
/// subgradient zero at the hinge point. Gradients are with respect to the
/// three unit vectors in order (anchor, positive, negative).
pub fn angular_triplet(
    anchor: &UnitVector,
    positive: &UnitVector,
    negative: &UnitVector,
    margin: f64,
) -> Result<(f64, Array1<f64>, Array1<f64>, Array1<f64>)> {
    assert!(margin >= 0.0, "margin must be non-negative");
    let d = anchor.dim();
    if positive.dim() != d || negative.dim() != d {
        return Err(Error::DimensionMismatch { left: d, right: positive.dim().max(negative.dim()) });
    }
    let (loss, ga, gp, gn) = triplet_on_views(anchor.view(), positive.view(), negative.view(), margin);
    Ok((loss, ga, gp, gn))
}

pub(crate) fn triplet_on_views(
    anchor: ArrayView1<f64>,
    positive: ArrayView1<f64>,
    negative: ArrayView1<f64>,
    margin: f64,
) -> (f64, Array1<f64>, Array1<f64>, Array1<f64>) {
    let d = anchor.len();
    let tp = vdot(anchor, positive).clamp(-1.0, 1.0);
    let tn = vdot(anchor, negative).clamp(-1.0, 1.0);
    let value = tp.acos() + margin - tn.acos();
    let mut ga = Array1::zeros(d);
    let mut gp = Array1::zeros(d);
    let mut gn = Array1::zeros(d);
    if value <= 0.0 {
        return (0.0, ga, gp, gn);
    }
    let dp = -1.0 / (1.0 - tp * tp).sqrt().max(SIN_FLOOR);
    let dn = -1.0 / (1.0 - tn * tn).sqrt().max(SIN_FLOOR);
    for a in 0..d {
        ga[a] = dp * positive[a] - dn * negative[a];
        gp[a] = dp * anchor[a];
        gn[a] = -dn * anchor[a];
    }
    (value, ga, gp, gn)
}

/// Class-1 angle at which the transformed class-1 logit equals cos(theta2)
/// in the binary case, solved by bisection to 1e-10. `None` when cos(theta2)
/// exceeds the transformed logit at theta1 = 0.
pub fn decision_boundary(spec: &MarginSpec, theta2: f64) -> Option<f64> {
    assert!(
        (0.0..=std::f64::consts::PI).contains(&theta2),
        "theta2 outside [0, pi]"
    );
    let target = theta2.cos();
    let f = |theta: f64| psi_from_theta(theta, spec).0 - target;
    if f(0.0) < 0.0 {
        return None;
    }
    let (mut lo, mut hi) = (0.0f64, std::f64::consts::PI);
    // f(lo) >= 0; drive the bracket below 1e-10.
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 {
            break;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Which composed training objective to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Margin softmax, Preset/MarginSpec controlled.
    Combined,
    /// Margin softmax plus the intra-class angle penalty.
    CombinedIntra,
    /// Margin softmax plus the centre-spreading penalty.
    CombinedInter,
    /// Margin softmax plus the angular triplet hinge on batch triples.
    CombinedTriplet,
    /// Angular triplet hinge alone; centres receive no gradient.
    TripletOnly,
    /// Plain softmax on raw scores, no normalisation and no scale.
    SoftmaxUnnormalized,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Combined,
        LossKind::CombinedIntra,
        LossKind::CombinedInter,
        LossKind::CombinedTriplet,
        LossKind::TripletOnly,
        LossKind::SoftmaxUnnormalized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Combined => "combined",
            LossKind::CombinedIntra => "combined+intra",
            LossKind::CombinedInter => "combined+inter",
            LossKind::CombinedTriplet => "combined+triplet",
            LossKind::TripletOnly => "triplet-only",
            LossKind::SoftmaxUnnormalized => "softmax-unnormalized",
        }
    }

    pub fn from_name(name: &str) -> Option<LossKind> {
        LossKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

/// Extra knobs for the composed objectives.
#[derive(Debug, Clone, Copy)]
pub struct PenaltyConfig {
    /// Weight on the intra/inter/triplet term added to the margin softmax.
    pub weight: f64,
    /// Margin of the angular triplet hinge, radians.
    pub triplet_margin: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig { weight: 1.0, triplet_margin: 0.35 }
    }
}

/// In-batch triples: each anchor takes the next same-class sample and the
/// next different-class sample in cyclic batch order. Anchors without a
/// same-class partner are skipped.
pub fn batch_triples(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    let mut triples = Vec::new();
    for i in 0..n {
        let mut pos = None;
        let mut neg = None;
        for step in 1..n {
            let j = (i + step) % n;
            if pos.is_none() && labels[j] == labels[i] {
                pos = Some(j);
            }
            if neg.is_none() && labels[j] != labels[i] {
                neg = Some(j);
            }
            if pos.is_some() && neg.is_some() {
                break;
            }
        }
        if let (Some(p), Some(q)) = (pos, neg) {
            triples.push((i, p, q));
        }
    }
    triples
}

/// Mean triplet hinge over the in-batch triples of normalised features, with
/// gradients with respect to the unit rows.
fn triplet_term_on_unit(
    feats: &EmbeddingBatch,
    labels: &[usize],
    margin: f64,
) -> (f64, Array2<f64>) {
    let triples = batch_triples(labels);
    let mut grad_u = Array2::zeros((feats.len(), feats.dim()));
    if triples.is_empty() {
        return (0.0, grad_u);
    }
    let scale = 1.0 / triples.len() as f64;
    let mut total = 0.0;
    for &(a, p, q) in &triples {
        let (loss, ga, gp, gq) = triplet_on_views(feats.row(a), feats.row(p), feats.row(q), margin);
        total += loss;
        for c in 0..feats.dim() {
            grad_u[(a, c)] += scale * ga[c];
            grad_u[(p, c)] += scale * gp[c];
            grad_u[(q, c)] += scale * gq[c];
        }
    }
    (scale * total, grad_u)
}

/// One entry point for every composed objective, on raw inputs.
pub fn batch_loss(
    kind: LossKind,
    features_raw: &Array2<f64>,
    centres_raw: &Array2<f64>,
    labels: &[usize],
    spec: &MarginSpec,
    penalties: &PenaltyConfig,
) -> Result<LossOutput> {
    match kind {
        LossKind::Combined => combined_loss(features_raw, centres_raw, labels, spec),
        LossKind::SoftmaxUnnormalized => softmax_unnormalized(features_raw, centres_raw, labels),
        LossKind::CombinedIntra | LossKind::CombinedInter | LossKind::CombinedTriplet => {
            let feats = normalize_rows(features_raw)?;
            let centres = normalize_columns(centres_raw)?;
            let (mut loss, mut grad_u, mut grad_v) =
                margin_loss_on_unit(&feats, &centres, labels, spec)?;
            match kind {
                LossKind::CombinedIntra => {
                    let (p, gu, gv) = intra_penalty(&feats, &centres, labels)?;
                    loss += penalties.weight * p;
                    grad_u.scaled_add(penalties.weight, &gu);
                    grad_v.scaled_add(penalties.weight, &gv);
                }
                LossKind::CombinedInter => {
                    let (p, gv) = inter_penalty(&centres, labels)?;
                    loss += penalties.weight * p;
                    grad_v.scaled_add(penalties.weight, &gv);
                }
                LossKind::CombinedTriplet => {
                    let (p, gu) = triplet_term_on_unit(&feats, labels, penalties.triplet_margin);
                    loss += penalties.weight * p;
                    grad_u.scaled_add(penalties.weight, &gu);
                }
                _ => unreachable!(),
            }
            let grad_features = chain_row_normalization(features_raw, feats.rows(), &grad_u);
            let grad_centres = chain_col_normalization(centres_raw, centres.cols(), &grad_v);
            Ok(LossOutput { loss, grad_features, grad_centres })
        }
        LossKind::TripletOnly => {
            let feats = normalize_rows(features_raw)?;
            let (loss, grad_u) = triplet_term_on_unit(&feats, labels, penalties.triplet_margin);
            let grad_features = chain_row_normalization(features_raw, feats.rows(), &grad_u);
            Ok(LossOutput {
                loss,
                grad_features,
                grad_centres: Array2::zeros(centres_raw.dim()),
            })
        }
    }
}

/// Plain softmax cross entropy on raw scores X W (bias-free), without any
/// normalisation or scaling.
fn softmax_unnormalized(
    features_raw: &Array2<f64>,
    centres_raw: &Array2<f64>,
    labels: &[usize],
) -> Result<LossOutput> {
    let (batch, d) = features_raw.dim();
    let classes = centres_raw.ncols();
    if d != centres_raw.nrows() {
        return Err(Error::DimensionMismatch { left: d, right: centres_raw.nrows() });
    }
    let mut scores = Array2::zeros((batch, classes));
    for i in 0..batch {
        for j in 0..classes {
            scores[(i, j)] = vdot(features_raw.row(i), centres_raw.column(j));
        }
    }
    let block = LogitBlock::post_scale(scores)?;
    let (loss, grad_scores) = softmax_xent(&block, labels)?;
    let mut grad_features = Array2::zeros((batch, d));
    let mut grad_centres = Array2::zeros((d, classes));
    for i in 0..batch {
        for j in 0..classes {
            let g = grad_scores[(i, j)];
            for a in 0..d {
                grad_features[(i, a)] += g * centres_raw[(a, j)];
                grad_centres[(a, j)] += g * features_raw[(i, a)];
            }
        }
    }
    Ok(LossOutput { loss, grad_features, grad_centres })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypersphere::sample_uniform_sphere;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn target_logit_softmax_is_cos() {
        let spec = Preset::Softmax.spec();
        assert_eq!(target_logit(0.0, &spec).unwrap(), 1.0);
        assert!((target_logit(1.1, &spec).unwrap() - 1.1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn target_logit_arcface_at_zero() {
        let v = target_logit(0.0, &Preset::ArcFace.spec()).unwrap();
        assert!((v - 0.8775825618903728).abs() < 1e-15);
    }

    #[test]
    fn target_logit_cm1_closed_form() {
        let v = target_logit(PI / 3.0, &Preset::Cm1.spec()).unwrap();
        assert!((v - 0.0217402382624556).abs() < 1e-13, "{v}");
    }

    #[test]
    fn target_logit_rejects_out_of_range() {
        let spec = Preset::ArcFace.spec();
        assert!(matches!(
            target_logit(-0.1, &spec),
            Err(Error::ThetaOutOfRange { .. })
        ));
        assert!(matches!(
            target_logit(PI + 0.1, &spec),
            Err(Error::ThetaOutOfRange { .. })
        ));
    }

    #[test]
    fn margins_only_penalize() {
        // psi(theta) <= cos(theta) on a dense grid for every preset, equal
        // everywhere only for the softmax preset.
        for preset in Preset::ALL {
            let spec = preset.spec();
            let mut strict_somewhere = false;
            for k in 1..10_000 {
                let theta = PI * k as f64 / 10_000.0;
                let psi = target_logit(theta, &spec).unwrap();
                assert!(
                    psi <= theta.cos() + 1e-12,
                    "{}: psi({theta}) = {psi} above cos",
                    preset.name()
                );
                if psi < theta.cos() - 1e-12 {
                    strict_somewhere = true;
                }
            }
            assert_eq!(
                strict_somewhere,
                preset != Preset::Softmax,
                "{}",
                preset.name()
            );
        }
    }

    #[test]
    fn arcface_below_softmax_before_fallback() {
        let arc = Preset::ArcFace.spec();
        for k in 1..1000 {
            let theta = (PI - 0.5) * k as f64 / 1000.0;
            let a = target_logit(theta, &arc).unwrap();
            assert!(a < theta.cos(), "theta={theta}");
        }
    }

    #[test]
    fn fallback_value_at_pi() {
        // ArcFace at theta = pi: cos(pi) - 0.5 sin(0.5).
        let v = target_logit(PI, &Preset::ArcFace.spec()).unwrap();
        assert!((v - (-1.0 - 0.5 * 0.5f64.sin())).abs() < 1e-15);
    }

    #[test]
    fn fallback_jump_matches_analytic_size() {
        // The branch switch has a known downward step of
        // cos(m2) + m2 sin(m2) - 1 for m1 = 1 presets; check ArcFace.
        let spec = Preset::ArcFace.spec();
        let junction = PI - spec.m2;
        let before = target_logit(junction - 1e-9, &spec).unwrap();
        let after = target_logit(junction + 1e-9, &spec).unwrap();
        let expected_jump = spec.m2.cos() + spec.m2 * spec.m2.sin() - 1.0;
        assert!((before - after - expected_jump).abs() < 1e-6, "{}", before - after);
        // Monotone non-increasing across the switch for m1 = 1.
        assert!(after < before);
    }

    #[test]
    fn fallback_continuous_when_m2_zero_m1_one() {
        let spec = MarginSpec::new(1.0, 0.0, 0.2, 64.0).unwrap();
        let before = psi_from_theta(PI - 1e-12, &spec).0;
        let after = psi_from_theta(PI, &spec).0;
        assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn monotone_decreasing_for_unit_m1_presets() {
        for preset in [Preset::Softmax, Preset::ArcFace, Preset::CosFace, Preset::Cm1] {
            let spec = preset.spec();
            let mut last = f64::INFINITY;
            for k in 0..=10_000 {
                let theta = PI * k as f64 / 10_000.0;
                let v = target_logit(theta, &spec).unwrap();
                assert!(v <= last + 1e-12, "{} at {theta}", preset.name());
                last = v;
            }
        }
    }

    #[test]
    fn curve_softmax_is_cosine_in_degrees() {
        let pairs = target_logit_curve(&Preset::Softmax.spec(), &default_curve_grid(5.0)).unwrap();
        assert_eq!(pairs[0].0.round() as i64, 20);
        assert_eq!(pairs.last().unwrap().0.round() as i64, 100);
        for (deg, v) in pairs {
            assert!((v - deg.to_radians().cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn curve_cosface_at_ninety_degrees() {
        let v = target_logit(FRAC_PI_2, &Preset::CosFace.spec()).unwrap();
        assert!((v - (-0.35)).abs() < 1e-12);
    }

    #[test]
    fn margin_forward_softmax_scales_everything() {
        let cos = LogitBlock::pre_scale(array![[0.4, -0.2], [0.1, 0.9]]).unwrap();
        let out = margin_forward(&cos, &[0, 1], &Preset::Softmax.spec()).unwrap();
        for (a, b) in out.values().iter().zip(cos.values().iter()) {
            assert!((a - 64.0 * b).abs() < 1e-9);
        }
    }

    #[test]
    fn margin_forward_arcface_gt_column() {
        let cos = LogitBlock::pre_scale(array![[1.0, 0.3]]).unwrap();
        let out = margin_forward(&cos, &[0], &Preset::ArcFace.spec()).unwrap();
        assert!((out.values()[(0, 0)] - 64.0 * 0.5f64.cos()).abs() < 1e-12);
        assert!((out.values()[(0, 1)] - 64.0 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn margin_forward_fallback_at_antipode() {
        let cos = LogitBlock::pre_scale(array![[-1.0, 0.0]]).unwrap();
        let out = margin_forward(&cos, &[0], &Preset::ArcFace.spec()).unwrap();
        let expect = 64.0 * (-1.0 - 0.5 * 0.5f64.sin());
        assert!((out.values()[(0, 0)] - expect).abs() < 1e-12);
    }

    #[test]
    fn margin_forward_label_out_of_range() {
        let cos = LogitBlock::pre_scale(array![[0.0, 0.0]]).unwrap();
        assert_eq!(
            margin_forward(&cos, &[2], &Preset::ArcFace.spec()).unwrap_err(),
            Error::LabelOutOfRange { label: 2, classes: 2 }
        );
    }

    #[test]
    fn xent_symmetric_two_class() {
        let block = LogitBlock::post_scale(array![[0.0, 0.0]]).unwrap();
        let (loss, grad) = softmax_xent(&block, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((grad[(0, 0)] + 0.5).abs() < 1e-15);
        assert!((grad[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn xent_saturated_score_is_tiny() {
        let block = LogitBlock::post_scale(array![[56.165, 0.0]]).unwrap();
        let (loss, _) = softmax_xent(&block, &[0]).unwrap();
        assert!(loss.abs() < 1e-20, "{loss}");
    }

    #[test]
    fn xent_rejects_non_finite() {
        assert_eq!(
            LogitBlock::post_scale(array![[f64::NAN, 0.0]]).unwrap_err(),
            Error::NonFiniteInput
        );
    }

    #[test]
    fn xent_grad_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Array2::from_shape_fn((6, 9), |_| {
            rand::Rng::random_range(&mut rng, -3.0..3.0)
        });
        let block = LogitBlock::post_scale(z).unwrap();
        let labels: Vec<usize> = (0..6).map(|i| i % 9).collect();
        let (_, grad) = softmax_xent(&block, &labels).unwrap();
        for row in grad.rows() {
            let s: f64 = row.sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn combined_loss_perfect_alignment() {
        // Feature sits exactly on its centre; other centre orthogonal.
        let features = array![[2.0, 0.0]]; // scale invariance: raw norm 2
        let centres = array![[1.0, 0.0], [0.0, 1.0]];
        let out = combined_loss(&features, &centres, &[0], &Preset::ArcFace.spec()).unwrap();
        let expect = (1.0 + (64.0 * (0.0 - 0.5f64.cos())).exp()).ln();
        assert!((out.loss - expect).abs() < 1e-15, "{} vs {}", out.loss, expect);
        assert!(out.loss < 1e-12);
    }

    #[test]
    fn combined_loss_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let features = Array2::from_shape_fn((4, 3), |_| {
            rand::Rng::random_range(&mut rng, -1.0..1.0)
        });
        let centres = Array2::from_shape_fn((3, 5), |_| {
            rand::Rng::random_range(&mut rng, -1.0..1.0)
        });
        let labels = [0usize, 2, 4, 1];
        let spec = Preset::ArcFace.spec();
        let base = combined_loss(&features, &centres, &labels, &spec).unwrap().loss;
        let mut f2 = features.clone();
        for v in f2.row_mut(1).iter_mut() {
            *v *= 37.5;
        }
        let mut c2 = centres.clone();
        for v in c2.column_mut(3).iter_mut() {
            *v *= 0.003;
        }
        let scaled = combined_loss(&f2, &c2, &labels, &spec).unwrap().loss;
        assert!((base - scaled).abs() < 1e-10, "{base} vs {scaled}");
    }

    #[test]
    fn combined_loss_zero_row_fails() {
        let features = array![[0.0, 0.0]];
        let centres = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(
            combined_loss(&features, &centres, &[0], &Preset::ArcFace.spec()).unwrap_err(),
            Error::ZeroVector { index: 0 }
        );
    }

    #[test]
    fn intra_penalty_aligned_and_orthogonal() {
        let feats = normalize_rows(&array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let centres = normalize_columns(&array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let (aligned, _, _) = intra_penalty(&feats, &centres, &[0, 1]).unwrap();
        assert!(aligned.abs() < 1e-12);
        let (ortho, _, _) = intra_penalty(&feats, &centres, &[1, 0]).unwrap();
        assert!((ortho - 0.5).abs() < 1e-12);
    }

    #[test]
    fn inter_penalty_orthogonal_and_antipodal() {
        let ortho = normalize_columns(&array![
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0]
        ])
        .unwrap();
        let (v, _) = inter_penalty(&ortho, &[0, 1, 2, 1]).unwrap();
        assert!((v + 0.5).abs() < 1e-12);

        let anti = normalize_columns(&array![[1.0, -1.0], [0.0, 0.0]]).unwrap();
        let (v, _) = inter_penalty(&anti, &[0, 1]).unwrap();
        assert!((v + 1.0).abs() < 1e-12);
    }

    #[test]
    fn triplet_hinge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 6;
        // Build unit vectors with controlled angles to the anchor.
        let a = sample_uniform_sphere(d, &mut rng);
        let make_at = |theta: f64, rng: &mut ChaCha8Rng| {
            // Gram-Schmidt a random orthogonal direction, then rotate.
            loop {
                let r = sample_uniform_sphere(d, rng);
                let proj = vdot(r.view(), a.view());
                let mut t = r.view().to_owned() - proj * &a.view().to_owned();
                let norm = vdot(t.view(), t.view()).sqrt();
                if norm > 1e-6 {
                    t.mapv_inplace(|x| x / norm);
                    let v = theta.cos() * &a.view().to_owned() + theta.sin() * &t;
                    return UnitVector::normalize(v).unwrap();
                }
            }
        };
        let p = make_at(0.2, &mut rng);
        let n = make_at(1.0, &mut rng);
        let (satisfied, _, _, _) = angular_triplet(&a, &p, &n, 0.35).unwrap();
        assert_eq!(satisfied, 0.0);

        let p2 = make_at(0.9, &mut rng);
        let (active, _, _, _) = angular_triplet(&a, &p2, &n, 0.35).unwrap();
        assert!((active - 0.25).abs() < 1e-9, "{active}");
    }

    #[test]
    fn boundary_softmax_is_diagonal() {
        let spec = Preset::Softmax.spec();
        for k in 0..=20 {
            let theta2 = PI * k as f64 / 20.0;
            let theta1 = decision_boundary(&spec, theta2).unwrap();
            assert!((theta1 - theta2).abs() < 1e-9, "{theta1} vs {theta2}");
        }
    }

    #[test]
    fn boundary_arcface_constant_width() {
        let spec = Preset::ArcFace.spec();
        let theta1 = decision_boundary(&spec, 1.0).unwrap();
        assert!((theta1 - 0.5).abs() < 1e-9);
        for k in 0..=50 {
            let theta2 = 0.5 + (PI - 0.5) * k as f64 / 50.0;
            let theta1 = decision_boundary(&spec, theta2).unwrap();
            assert!(
                (theta2 - theta1 - 0.5).abs() < 1e-9,
                "width {} at theta2={theta2}",
                theta2 - theta1
            );
        }
    }

    #[test]
    fn boundary_cosface_width_varies() {
        let spec = Preset::CosFace.spec();
        let t1 = decision_boundary(&spec, FRAC_PI_2).unwrap();
        assert!((t1 - (0.35f64).acos()).abs() < 1e-9);
        let mut widths = Vec::new();
        for k in 0..=50 {
            let theta2 = 0.5 + (PI - 0.5) * k as f64 / 50.0;
            if let Some(t1) = decision_boundary(&spec, theta2) {
                widths.push(theta2 - t1);
            }
        }
        let (min, max) = widths
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| {
                (lo.min(w), hi.max(w))
            });
        assert!(max - min > 1e-3, "width spread {}", max - min);
    }

    #[test]
    fn boundary_no_solution_for_tight_angles() {
        // cos(theta2) above the margin-reduced maximum logit.
        let spec = Preset::ArcFace.spec();
        assert_eq!(decision_boundary(&spec, 0.0), None);
    }

    #[test]
    fn boundary_matches_grid_scan() {
        let spec = Preset::CosFace.spec();
        for &theta2 in &[0.7, 1.3, 2.3] {
            let solved = decision_boundary(&spec, theta2).unwrap();
            // Dense scan oracle.
            let target = theta2.cos();
            let mut best = (f64::INFINITY, 0.0);
            let grid = 4_000_000;
            for k in 0..=grid {
                let theta = PI * k as f64 / grid as f64;
                let v = (target_logit(theta, &spec).unwrap() - target).abs();
                if v < best.0 {
                    best = (v, theta);
                }
            }
            assert!(
                (solved - best.1).abs() < 2e-6,
                "bisection {solved} vs grid {}",
                best.1
            );
        }
    }

    #[test]
    fn batch_triples_skip_singletons() {
        let triples = batch_triples(&[0, 1, 0, 2]);
        // Label 1 and 2 have no positive partner; anchors 0 and 2 do.
        assert_eq!(triples, vec![(0, 2, 1), (2, 0, 3)]);
    }
}
