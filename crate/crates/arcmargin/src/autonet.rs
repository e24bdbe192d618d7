//! Minimal differentiable feature extractor, SGD with momentum and weight
//! decay, synthetic cluster data, and the deterministic toy training loop.

use ndarray::{Array1, Array2, Dimension};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::anglestats::class_centres;
use crate::error::{Error, Result};
use crate::hypersphere::{angle_from_dot, normalize_rows, sample_uniform_sphere, vdot};
use crate::margin::{batch_loss, LossKind, MarginSpec, PenaltyConfig};

/// Two-layer perceptron: affine - rectifier - affine.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ToyNet {
    /// Gaussian init scaled by `scale`, biases zero.
    pub fn init<R: Rng + ?Sized>(d_in: usize, hidden: usize, d_emb: usize, scale: f64, rng: &mut R) -> Self {
        ToyNet {
            w1: Array2::from_shape_fn((d_in, hidden), |_| rng.sample::<f64, _>(StandardNormal) * scale),
            b1: Array1::zeros(hidden),
            w2: Array2::from_shape_fn((hidden, d_emb), |_| rng.sample::<f64, _>(StandardNormal) * scale),
            b2: Array1::zeros(d_emb),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn d_emb(&self) -> usize {
        self.w2.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().all(|v| v.is_finite())
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
    }
}

/// Raw (unnormalised) embeddings for a batch of inputs.
pub fn forward(net: &ToyNet, inputs: &Array2<f64>) -> Array2<f64> {
    let n = inputs.nrows();
    let (h, d_emb) = (net.hidden(), net.d_emb());
    let mut hidden = Array2::zeros((n, h));
    for i in 0..n {
        for j in 0..h {
            let z = vdot(inputs.row(i), net.w1.column(j)) + net.b1[j];
            hidden[(i, j)] = z.max(0.0);
        }
    }
    let mut emb = Array2::zeros((n, d_emb));
    for i in 0..n {
        for j in 0..d_emb {
            emb[(i, j)] = vdot(hidden.row(i), net.w2.column(j)) + net.b2[j];
        }
    }
    emb
}

/// Parameter gradients matching the fields of [`ToyNet`].
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Chain rule through the two layers for an upstream gradient on the raw
/// embeddings.
pub fn backward(net: &ToyNet, inputs: &Array2<f64>, grad_emb: &Array2<f64>) -> NetGrads {
    let n = inputs.nrows();
    let (d_in, h, d_emb) = (net.d_in(), net.hidden(), net.d_emb());
    assert_eq!(grad_emb.dim(), (n, d_emb), "upstream gradient shape");

    // Recompute pre-activations; toy scale makes caching unnecessary.
    let mut z1 = Array2::zeros((n, h));
    for i in 0..n {
        for j in 0..h {
            z1[(i, j)] = vdot(inputs.row(i), net.w1.column(j)) + net.b1[j];
        }
    }
    let hidden = z1.mapv(|z| z.max(0.0));

    let mut gw2 = Array2::zeros((h, d_emb));
    let mut gb2 = Array1::zeros(d_emb);
    for i in 0..n {
        for j in 0..d_emb {
            let g = grad_emb[(i, j)];
            gb2[j] += g;
            for a in 0..h {
                gw2[(a, j)] += hidden[(i, a)] * g;
            }
        }
    }

    let mut gw1 = Array2::zeros((d_in, h));
    let mut gb1 = Array1::zeros(h);
    for i in 0..n {
        for a in 0..h {
            if z1[(i, a)] <= 0.0 {
                continue;
            }
            let mut g = 0.0;
            for j in 0..d_emb {
                g += grad_emb[(i, j)] * net.w2[(a, j)];
            }
            gb1[a] += g;
            for c in 0..d_in {
                gw1[(c, a)] += inputs[(i, c)] * g;
            }
        }
    }
    NetGrads { w1: gw1, b1: gb1, w2: gw2, b2: gb2 }
}

/// One SGD update: v <- momentum v + grad + wd p; p <- p - lr v.
pub fn sgd_step<D: Dimension>(
    param: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    velocity: &mut ndarray::Array<f64, D>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    assert_eq!(param.raw_dim(), grad.raw_dim(), "shape mismatch");
    assert_eq!(param.raw_dim(), velocity.raw_dim(), "shape mismatch");
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    for ((p, g), v) in param.iter_mut().zip(grad.iter()).zip(velocity.iter_mut()) {
        *v = momentum * *v + *g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Synthetic cluster dataset description.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub d_in: usize,
    /// Cluster concentration; noise scale is 1/sqrt(kappa).
    pub kappa: f64,
    pub seed: u64,
}

/// Minimum pairwise angle between sampled class means, degrees.
pub const MEAN_SEPARATION_DEG: f64 = 15.0;
const MEAN_REJECTION_LIMIT: usize = 10_000;

/// Draws class means uniformly on the sphere (rejecting means closer than
/// 15 degrees to an earlier one), then Gaussian samples around each mean.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(Array2<f64>, Vec<usize>)> {
    assert!(spec.n_classes >= 2, "need at least two classes");
    assert!(spec.kappa > 0.0, "kappa must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let min_dot = MEAN_SEPARATION_DEG.to_radians().cos();

    let mut means: Vec<Array1<f64>> = Vec::with_capacity(spec.n_classes);
    let mut attempts = 0usize;
    while means.len() < spec.n_classes {
        attempts += 1;
        if attempts > MEAN_REJECTION_LIMIT {
            return Err(Error::RejectionExhausted {
                wanted: spec.n_classes,
                min_deg: MEAN_SEPARATION_DEG,
                attempts: MEAN_REJECTION_LIMIT,
            });
        }
        let cand = sample_uniform_sphere(spec.d_in, &mut rng).into_inner();
        if means.iter().all(|m| vdot(m.view(), cand.view()) < min_dot) {
            means.push(cand);
        }
    }

    let total = spec.n_classes * spec.samples_per_class;
    let noise = 1.0 / spec.kappa.sqrt();
    let mut inputs = Array2::zeros((total, spec.d_in));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for a in 0..spec.d_in {
                inputs[(row, a)] = mean[a] + rng.sample::<f64, _>(StandardNormal) * noise;
            }
            labels.push(c);
            row += 1;
        }
    }
    Ok((inputs, labels))
}

/// Seeded permutation split into (train, held-out) index sets.
pub fn train_test_split(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    assert!((0.0..=1.0).contains(&train_fraction));
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let cut = (n as f64 * train_fraction).round() as usize;
    let test = idx.split_off(cut);
    (idx, test)
}

/// Training-loop settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    /// Iterations at which the learning rate divides by 10.
    pub lr_drops: Vec<usize>,
    pub total_iters: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub margin: MarginSpec,
    pub loss_kind: LossKind,
    pub penalties: PenaltyConfig,
    pub hidden: usize,
    pub d_emb: usize,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            lr_drops: vec![1200, 1700],
            total_iters: 2000,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 512,
            seed: 7,
            margin: MarginSpec::normalized_softmax(64.0),
            loss_kind: LossKind::Combined,
            penalties: PenaltyConfig::default(),
            hidden: 32,
            d_emb: 2,
            init_scale: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.total_iters > 0
            && self.batch_size > 0;
        if ok { Ok(()) } else { Err(Error::NonFiniteInput) }
    }
}

/// Ground-truth angle histogram captured during training.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaSnapshot {
    pub iter: usize,
    /// Counts over fixed-width degree bins spanning [0, 180].
    pub counts: Vec<u64>,
    pub bin_width_deg: f64,
}

pub const THETA_SNAPSHOT_BINS: usize = 90;

/// Everything the training loop produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ToyNet,
    /// Raw (unnormalised) centre matrix, d_emb x n.
    pub centres_raw: Array2<f64>,
    pub loss_trace: Vec<f64>,
    pub theta_snapshots: Vec<ThetaSnapshot>,
}

/// Runs the loop: batch -> forward -> loss (per `loss_kind`) -> backward ->
/// SGD on net and raw centres. Single-threaded; identical config and seed
/// give bit-identical results.
pub fn train(
    config: &TrainConfig,
    inputs: &Array2<f64>,
    labels: &[usize],
    n_classes: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = inputs.nrows();
    assert_eq!(labels.len(), n, "one label per input row");
    assert!(n_classes >= 2);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = ToyNet::init(inputs.ncols(), config.hidden, config.d_emb, config.init_scale, &mut rng);

    // Gaussian centre init, column-normalised; the raw matrix is what SGD
    // updates, normalisation happens inside the loss every step.
    let mut centres_raw = Array2::from_shape_fn((config.d_emb, n_classes), |_| {
        rng.sample::<f64, _>(StandardNormal)
    });
    for mut col in centres_raw.columns_mut() {
        let norm = vdot(col.view(), col.view()).sqrt().max(1e-30);
        col.mapv_inplace(|x| x / norm);
    }

    let mut vel_w1 = Array2::zeros(net.w1.dim());
    let mut vel_b1 = Array1::zeros(net.b1.dim());
    let mut vel_w2 = Array2::zeros(net.w2.dim());
    let mut vel_b2 = Array1::zeros(net.b2.dim());
    let mut vel_c = Array2::zeros(centres_raw.dim());

    let batch = config.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut loss_trace = Vec::with_capacity(config.total_iters);
    let mut theta_snapshots = Vec::new();
    let snapshot_iters = [0, config.total_iters / 2, config.total_iters - 1];

    let mut lr = config.lr;
    for it in 0..config.total_iters {
        if config.lr_drops.contains(&it) {
            lr /= 10.0;
        }
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;

        let mut xb = Array2::zeros((batch, inputs.ncols()));
        let mut yb = Vec::with_capacity(batch);
        for (r, &i) in idx.iter().enumerate() {
            xb.row_mut(r).assign(&inputs.row(i));
            yb.push(labels[i]);
        }

        if snapshot_iters.contains(&it) {
            theta_snapshots.push(theta_snapshot(it, &net, &centres_raw, inputs, labels));
        }

        let emb = forward(&net, &xb);
        let out = batch_loss(
            config.loss_kind,
            &emb,
            &centres_raw,
            &yb,
            &config.margin,
            &config.penalties,
        )?;
        if !out.loss.is_finite() {
            return Err(Error::DivergenceDetected { iter: it });
        }
        loss_trace.push(out.loss);

        let grads = backward(&net, &xb, &out.grad_features);
        sgd_step(&mut net.w1, &grads.w1, &mut vel_w1, lr, config.momentum, config.weight_decay)?;
        sgd_step(&mut net.b1, &grads.b1, &mut vel_b1, lr, config.momentum, config.weight_decay)?;
        sgd_step(&mut net.w2, &grads.w2, &mut vel_w2, lr, config.momentum, config.weight_decay)?;
        sgd_step(&mut net.b2, &grads.b2, &mut vel_b2, lr, config.momentum, config.weight_decay)?;
        sgd_step(&mut centres_raw, &out.grad_centres, &mut vel_c, lr, config.momentum, config.weight_decay)?;
    }

    Ok(TrainOutcome { net, centres_raw, loss_trace, theta_snapshots })
}

/// Histogram of ground-truth angles over the full dataset.
fn theta_snapshot(
    iter: usize,
    net: &ToyNet,
    centres_raw: &Array2<f64>,
    inputs: &Array2<f64>,
    labels: &[usize],
) -> ThetaSnapshot {
    let bin_width = 180.0 / THETA_SNAPSHOT_BINS as f64;
    let mut counts = vec![0u64; THETA_SNAPSHOT_BINS];
    let emb = forward(net, inputs);
    for (i, &label) in labels.iter().enumerate() {
        let e = emb.row(i);
        let enorm = vdot(e, e).sqrt();
        let c = centres_raw.column(label);
        let cnorm = vdot(c, c).sqrt();
        if enorm < 1e-30 || cnorm < 1e-30 {
            continue;
        }
        let deg = angle_from_dot(vdot(e, c) / (enorm * cnorm)).to_degrees();
        let bin = ((deg / bin_width) as usize).min(THETA_SNAPSHOT_BINS - 1);
        counts[bin] += 1;
    }
    ThetaSnapshot { iter, counts, bin_width_deg: bin_width }
}

/// Per-class angular spread and the pairwise separation table behind the
/// toy-experiment "evident gap" statistic.
#[derive(Debug, Clone)]
pub struct Fig3Report {
    /// 95th-percentile angle (degrees) between each class's samples and its
    /// circular mean direction.
    pub spread95_deg: Vec<f64>,
    /// (class a, class b, separation degrees) for every unordered pair.
    pub pair_separation_deg: Vec<(usize, usize, f64)>,
    /// min pair separation - 2 * max 95th-percentile spread.
    pub gap_deg: f64,
}

/// Builds the report from embeddings of `inputs` under a trained net.
pub fn fig3_report(
    net: &ToyNet,
    inputs: &Array2<f64>,
    labels: &[usize],
    n_classes: usize,
) -> Result<Fig3Report> {
    let emb = forward(net, inputs);
    let feats = normalize_rows(&emb)?;
    let centres = class_centres(&feats, labels, n_classes)?;

    let mut per_class_angles: Vec<Vec<f64>> = vec![Vec::new(); n_classes];
    for (i, &label) in labels.iter().enumerate() {
        let a = angle_from_dot(vdot(feats.row(i), centres.col(label))).to_degrees();
        per_class_angles[label].push(a);
    }
    let spread95_deg: Vec<f64> = per_class_angles
        .iter()
        .map(|angles| percentile_95(angles))
        .collect();

    let mut pair_separation_deg = Vec::new();
    let mut min_sep = f64::INFINITY;
    for a in 0..n_classes {
        for b in (a + 1)..n_classes {
            let sep = angle_from_dot(vdot(centres.col(a), centres.col(b))).to_degrees();
            min_sep = min_sep.min(sep);
            pair_separation_deg.push((a, b, sep));
        }
    }
    let max_spread = spread95_deg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(Fig3Report {
        spread95_deg,
        pair_separation_deg,
        gap_deg: min_sep - 2.0 * max_spread,
    })
}

/// Nearest-rank 95th percentile.
fn percentile_95(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "class with no samples");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}
