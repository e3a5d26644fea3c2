//! The rank-minimizing regularizer and energy-threshold rank selection.
//!
//! The penalty on a set of `M` spatial conv kernels is
//!
//! ```text
//! L_n = 1/(2M) · Σ_m [ tr(W_m⁽¹⁾ W_m⁽¹⁾ᵀ) + tr(W_m⁽²⁾ W_m⁽²⁾ᵀ) ]
//! ```
//!
//! with `W⁽¹⁾`, `W⁽²⁾` the mode-3 and mode-4 unfoldings. Both traces equal the
//! squared Frobenius norm of the kernel, so `L_n = (1/M) Σ_m ‖W_m‖²_F` and its
//! gradient is `(2/M) W_m`. No eigensolver runs during training; spectra are
//! only computed for logging and for picking ranks afterwards.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eig::gram_eig;
use crate::error::{Error, Result};
use crate::nn::{backward, forward, sgd_step, FeatureMap, Gradients, Layer, Network, ParamGrad, TrainConfig};
use crate::tensor::{dematricize_mode3, dematricize_mode4, matricize_mode3, matricize_mode4, DenseMatrix, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMethod {
    Nrmf,
    Vbmf,
    /// Full ranks; no compression intended.
    Full,
}

impl fmt::Display for RankMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            RankMethod::Nrmf => "nrmf",
            RankMethod::Vbmf => "vbmf",
            RankMethod::Full => "full",
        })
    }
}

impl std::str::FromStr for RankMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nrmf" => Ok(RankMethod::Nrmf),
            "vbmf" => Ok(RankMethod::Vbmf),
            "full" => Ok(RankMethod::Full),
            other => Err(Error::Config(format!("unknown rank method {other:?}"))),
        }
    }
}

/// Selected mode-3/mode-4 ranks of one conv layer and the energy behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPair {
    pub layer: usize,
    pub s: usize,
    pub t: usize,
    pub r3: usize,
    pub r4: usize,
    /// Total mode-3 / mode-4 Gram eigenvalue sums.
    pub e1: f64,
    pub e2: f64,
    /// Fraction of `e1` / `e2` kept by the leading `r3` / `r4` eigenvalues.
    pub retained1: f64,
    pub retained2: f64,
    pub method: RankMethod,
}

impl RankPair {
    /// Full ranks for a kernel.
    pub fn full(layer: usize, k: &Tensor4) -> RankPair {
        let e = k.sq_norm();
        RankPair {
            layer,
            s: k.s(),
            t: k.t(),
            r3: k.s(),
            r4: k.t(),
            e1: e,
            e2: e,
            retained1: 1.0,
            retained2: 1.0,
            method: RankMethod::Full,
        }
    }
}

/// Penalty applied to the regularized kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    /// Sum of Gram traces (default).
    #[default]
    GramTrace,
    /// Sum of singular values of the two unfoldings. Not used by default.
    Nuclear,
}

/// `L_n` for the regularized kernels, via the trace identity.
pub fn nuclear_loss(layers: &[&Tensor4]) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::EmptyLayerSet);
    }
    let m = layers.len() as f64;
    Ok(layers.iter().map(|k| k.sq_norm()).sum::<f64>() / m)
}

/// `∂L_n/∂W_m = (2/M) W_m`.
pub fn nuclear_loss_grad(layers: &[&Tensor4]) -> Result<Vec<Tensor4>> {
    if layers.is_empty() {
        return Err(Error::EmptyLayerSet);
    }
    let c = 2.0 / layers.len() as f64;
    Ok(layers.iter().map(|k| k.scaled(c)).collect())
}

/// Singular values below this fraction of the largest are treated as zero
/// by the nuclear-norm subgradient.
const NUCLEAR_RANK_TOL: f64 = 1e-10;

fn unfolding_nuclear(w: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    let eig = gram_eig(w)?;
    let sv: Vec<f64> = eig.eigenvalues.iter().map(|v| v.sqrt()).collect();
    let cutoff = sv.first().copied().unwrap_or(0.0) * NUCLEAR_RANK_TOL;
    let n = w.rows();
    // (W Wᵀ)^{-1/2} restricted to the numerical range, then times W gives U Vᵀ.
    let mut inv_root = DenseMatrix::zeros(n, n);
    for (i, &s) in sv.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        for r in 0..n {
            let a = eig.eigenvectors.get(r, i) / s;
            if a == 0.0 {
                continue;
            }
            for c in 0..n {
                let v = inv_root.get(r, c) + a * eig.eigenvectors.get(c, i);
                inv_root.set(r, c, v);
            }
        }
    }
    Ok((sv.iter().sum(), inv_root.matmul(w)?))
}

/// Value and gradients of the selected penalty.
pub fn penalty_value_and_grad(penalty: Penalty, layers: &[&Tensor4]) -> Result<(f64, Vec<Tensor4>)> {
    match penalty {
        Penalty::GramTrace => Ok((nuclear_loss(layers)?, nuclear_loss_grad(layers)?)),
        Penalty::Nuclear => {
            if layers.is_empty() {
                return Err(Error::EmptyLayerSet);
            }
            let scale = 1.0 / (2.0 * layers.len() as f64);
            let mut total = 0.0;
            let mut grads = Vec::with_capacity(layers.len());
            for k in layers {
                let (v3, g3) = unfolding_nuclear(&matricize_mode3(k))?;
                let (v4, g4) = unfolding_nuclear(&matricize_mode4(k))?;
                total += v3 + v4;
                let a = dematricize_mode3(&g3, k.dims())?;
                let b = dematricize_mode4(&g4, k.dims())?;
                let data = a.data().iter().zip(b.data()).map(|(x, y)| scale * (x + y)).collect();
                grads.push(Tensor4::from_vec(k.dims(), data)?);
            }
            Ok((scale * total, grads))
        }
    }
}

/// Smallest `R ≥ 1` whose leading eigenvalues hold at least `p` of the total.
/// Returns `(R, total, retained fraction)`.
///
/// A shortfall of `n·ε` relative counts as reached, so eigenvalues that are
/// roundoff of exact zeros do not inflate the rank at `p = 1`.
pub fn energy_rank(eigenvalues: &[f64], p: f64) -> Result<(usize, f64, f64)> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("energy threshold must be in (0, 1], got {p}")));
    }
    let total: f64 = eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateEnergy);
    }
    let slack = eigenvalues.len() as f64 * f64::EPSILON;
    let mut cum = 0.0;
    for (i, &v) in eigenvalues.iter().enumerate() {
        cum += v;
        if cum / total >= p - slack {
            return Ok((i + 1, total, cum / total));
        }
    }
    Ok((eigenvalues.len(), total, 1.0))
}

/// Sorted, clamped Gram eigenvalues of the mode-3 and mode-4 unfoldings.
pub fn gram_spectra(k: &Tensor4) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((gram_eig(&matricize_mode3(k))?.eigenvalues, gram_eig(&matricize_mode4(k))?.eigenvalues))
}

/// Energy-threshold ranks for one kernel. `layer` is left at 0.
pub fn select_ranks(kernel: &Tensor4, p: f64) -> Result<RankPair> {
    let (lambda, xi) = gram_spectra(kernel)?;
    let (r3, e1, retained1) = energy_rank(&lambda, p)?;
    let (r4, e2, retained2) = energy_rank(&xi, p)?;
    Ok(RankPair {
        layer: 0,
        s: kernel.s(),
        t: kernel.t(),
        r3,
        r4,
        e1,
        e2,
        retained1,
        retained2,
        method: RankMethod::Nrmf,
    })
}

/// [`select_ranks`] for every regularized conv layer of a network.
pub fn select_network_ranks(net: &Network, p: f64) -> Result<Vec<RankPair>> {
    net.regularized_layers()
        .into_iter()
        .map(|id| {
            let mut rp = select_ranks(&net.conv(id)?.kernel, p)?;
            rp.layer = id;
            Ok(rp)
        })
        .collect()
}

pub const RANK_CSV_HEADER: &str = "layer,S,T,r3,r4,e1,e2,retained1,retained2,method";

pub fn write_rank_csv<W: Write>(mut w: W, ranks: &[RankPair]) -> Result<()> {
    writeln!(w, "{RANK_CSV_HEADER}")?;
    for r in ranks {
        writeln!(
            w,
            "{},{},{},{},{},{:e},{:e},{},{},{}",
            r.layer, r.s, r.t, r.r3, r.r4, r.e1, r.e2, r.retained1, r.retained2, r.method
        )?;
    }
    Ok(())
}

pub fn read_rank_csv(text: &str) -> Result<Vec<RankPair>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RANK_CSV_HEADER => {}
        other => return Err(Error::Format(format!("unexpected rank CSV header {other:?}"))),
    }
    let bad = |line: &str| Error::Format(format!("bad rank CSV row {line:?}"));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad(line));
            }
            let u = |i: usize| f[i].trim().parse::<usize>().map_err(|_| bad(line));
            let x = |i: usize| f[i].trim().parse::<f64>().map_err(|_| bad(line));
            Ok(RankPair {
                layer: u(0)?,
                s: u(1)?,
                t: u(2)?,
                r3: u(3)?,
                r4: u(4)?,
                e1: x(5)?,
                e2: x(6)?,
                retained1: x(7)?,
                retained2: x(8)?,
                method: f[9].trim().parse()?,
            })
        })
        .collect()
}

/// Sorted Gram spectra of one monitored layer at one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct SvRecord {
    pub epoch: usize,
    /// Mode-3 Gram eigenvalues, non-increasing.
    pub lambda: Vec<f64>,
    /// Mode-4 Gram eigenvalues, non-increasing.
    pub xi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvTrajectory {
    pub layer: usize,
    pub records: Vec<SvRecord>,
}

impl SvTrajectory {
    pub fn new(layer: usize) -> Self {
        SvTrajectory { layer, records: Vec::new() }
    }

    /// `(epoch, Σλ, Σξ)` per record.
    pub fn energies(&self) -> Vec<(usize, f64, f64)> {
        self.records.iter().map(|r| (r.epoch, r.lambda.iter().sum(), r.xi.iter().sum())).collect()
    }

    /// Columns `epoch,mode,index,eigenvalue`; mode is 3 or 4, index from 0.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,mode,index,eigenvalue")?;
        for r in &self.records {
            for (mode, vals) in [(3, &r.lambda), (4, &r.xi)] {
                for (i, v) in vals.iter().enumerate() {
                    writeln!(w, "{},{},{},{:e}", r.epoch, mode, i, v)?;
                }
            }
        }
        Ok(())
    }
}

/// Append the current spectra of each trajectory's layer. Reads weights only.
pub fn log_epoch_svs(net: &Network, trajectories: &mut [SvTrajectory], epoch: usize) -> Result<()> {
    for traj in trajectories.iter_mut() {
        let conv = net.conv(traj.layer)?;
        let (lambda, xi) = gram_spectra(&conv.kernel)?;
        traj.records.push(SvRecord { epoch, lambda, xi });
    }
    Ok(())
}

/// Inputs and integer labels, ready for the network.
#[derive(Clone, Debug)]
pub struct Samples {
    pub images: FeatureMap,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather the given sample indices into one batch.
    pub fn batch(&self, idx: &[usize]) -> (FeatureMap, Vec<usize>) {
        let im = &self.images;
        let per = im.h * im.w * im.c;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(im.sample(i));
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (FeatureMap { n: idx.len(), h: im.h, w: im.w, c: im.c, data }, labels)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Layers whose spectra are logged; `None` logs every regularized layer.
    pub monitored: Option<Vec<usize>>,
    pub penalty: Penalty,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network,
    /// One record at epoch 0 (before training) and one after each epoch.
    pub trajectories: Vec<SvTrajectory>,
    /// Mean objective per epoch.
    pub epoch_objective: Vec<f64>,
}

/// Add `α ∂L_n/∂W` to the data-loss gradients of the regularized layers.
/// Returns `α L_n`.
pub fn add_regularizer(net: &Network, grads: &mut Gradients, alpha: f64, penalty: Penalty) -> Result<f64> {
    let ids = net.regularized_layers();
    let kernels: Vec<&Tensor4> = ids.iter().map(|&i| net.conv(i).map(|c| &c.kernel)).collect::<Result<_>>()?;
    let (value, reg) = penalty_value_and_grad(penalty, &kernels)?;
    for (id, g) in ids.iter().zip(reg) {
        match grads.layers.get_mut(*id) {
            Some(Some(ParamGrad::Conv { kernel, .. })) => {
                for (a, b) in kernel.data_mut().iter_mut().zip(g.data()) {
                    *a += alpha * b;
                }
            }
            _ => return Err(Error::Shape(format!("no conv gradient for layer {id}"))),
        }
    }
    Ok(alpha * value)
}

/// Objective `J = mean CE + α L_n` on one batch and its gradients.
pub fn objective_and_grad(
    net: &Network,
    batch: &FeatureMap,
    labels: &[usize],
    alpha: f64,
    penalty: Penalty,
) -> Result<(f64, Gradients)> {
    let (loss, cache) = forward(net, batch, labels)?;
    let mut grads = backward(net, &cache)?;
    let reg = if alpha != 0.0 { add_regularizer(net, &mut grads, alpha, penalty)? } else { 0.0 };
    Ok((loss + reg, grads))
}

/// Minibatch SGD on `J` for `cfg.epochs` epochs, logging spectra each epoch.
/// Shuffling and initialization are driven by `cfg.seed` only.
pub fn train(net: &Network, cfg: &TrainConfig, data: &Samples, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::DegenerateInput("empty training set".into()));
    }
    let mut net = net.clone();
    if cfg.alpha > 0.0 && net.regularized_layers().is_empty() {
        return Err(Error::EmptyLayerSet);
    }
    let monitored = opts.monitored.clone().unwrap_or_else(|| net.regularized_layers());
    let mut trajectories: Vec<SvTrajectory> = monitored.iter().map(|&l| SvTrajectory::new(l)).collect();
    log_epoch_svs(&net, &mut trajectories, 0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_objective = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk);
            let (j, grads) = objective_and_grad(&net, &x, &y, cfg.alpha, opts.penalty)?;
            sgd_step(&mut net, &grads, cfg, epoch)?;
            sum += j;
            batches += 1;
        }
        epoch_objective.push(sum / batches as f64);
        log_epoch_svs(&net, &mut trajectories, epoch + 1)?;
    }
    Ok(TrainOutcome { net, trajectories, epoch_objective })
}

#[derive(Clone, Debug)]
pub struct NrmfOutcome {
    pub net: Network,
    pub trajectories: Vec<SvTrajectory>,
    pub ranks: Vec<RankPair>,
    pub epoch_objective: Vec<f64>,
}

/// Train with the regularizer, then pick ranks at threshold `cfg.p` for every
/// regularized layer.
pub fn train_nrmf(net: &Network, cfg: &TrainConfig, data: &Samples, opts: &TrainOptions) -> Result<NrmfOutcome> {
    let out = train(net, cfg, data, opts)?;
    let ranks = select_network_ranks(&out.net, cfg.p)?;
    Ok(NrmfOutcome { net: out.net, trajectories: out.trajectories, ranks, epoch_objective: out.epoch_objective })
}

/// Regularized conv kernels of a network, in layer order.
pub fn regularized_kernels(net: &Network) -> Vec<&Tensor4> {
    net.layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Conv2d(c) if c.kernel.is_spatial() => Some(&c.kernel),
            _ => None,
        })
        .collect()
}
