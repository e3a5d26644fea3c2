//! Oracles and generators shared by the integration tests. Everything here
//! is written against plain index arithmetic or nalgebra, never against the
//! library routine it checks.
#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use nalgebra::DMatrix;
use nrmf::nn::FeatureMap;
use nrmf::tensor::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_kernel(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn uniform_input(n: usize, h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    let data = (0..n * h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureMap::from_vec(n, h, w, c, data).unwrap()
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `n × k` with orthonormal columns.
pub fn orthonormal(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    gaussian(n, k, rng).qr().q().columns(0, k).into_owned()
}

/// `S × (D_h·D_w·T)`.
pub fn unfold3(k: &Tensor4) -> DMatrix<f64> {
    let [dh, dw, s, t] = k.dims();
    DMatrix::from_fn(s, dh * dw * t, |i, c| {
        let (h, rest) = (c / (dw * t), c % (dw * t));
        k.get(h, rest / t, i, rest % t)
    })
}

/// `T × (D_h·D_w·S)`.
pub fn unfold4(k: &Tensor4) -> DMatrix<f64> {
    let [dh, dw, s, t] = k.dims();
    DMatrix::from_fn(t, dh * dw * s, |j, c| {
        let (h, rest) = (c / (dw * s), c % (dw * s));
        k.get(h, rest / s, rest % s, j)
    })
}

/// Singular values, non-increasing.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Gram eigenvalues (squared singular values), non-increasing.
pub fn gram_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    singular_values(m).iter().map(|s| s * s).collect()
}

/// Leading `k` left singular vectors.
pub fn leading_left(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    DMatrix::from_fn(m.nrows(), k, |r, c| u[(r, order[c])])
}

/// Smallest `R` whose running sum reaches `p` of the total, by scanning every
/// prefix. `None` when some prefix ratio sits within `slack` of `p`, where
/// eigenvalues from different solvers could disagree on the answer. At
/// `p = 1` this is the numerical rank.
pub fn brute_force_rank(eigs: &[f64], p: f64, slack: f64) -> Option<usize> {
    let top = eigs.iter().fold(0.0f64, |m, &v| m.max(v));
    if p >= 1.0 {
        let floor = top * eigs.len().max(1) as f64 * f64::EPSILON * 16.0;
        return Some(eigs.iter().filter(|&&v| v > floor).count().max(1));
    }
    let total: f64 = eigs.iter().sum();
    let ratios: Vec<f64> = (1..=eigs.len()).map(|r| eigs[..r].iter().sum::<f64>() / total).collect();
    if ratios.iter().any(|q| (q - p).abs() < slack) {
        return None;
    }
    let r = ratios.iter().position(|&q| q >= p).map(|i| i + 1).unwrap_or(eigs.len());
    Some(r)
}

/// Direct cross-correlation, one output value at a time.
pub fn naive_conv(k: &Tensor4, bias: Option<&[f64]>, x: &FeatureMap, stride: usize, pad: usize) -> FeatureMap {
    let [dh, dw, s, t] = k.dims();
    let oh = (x.h + 2 * pad - dh) / stride + 1;
    let ow = (x.w + 2 * pad - dw) / stride + 1;
    let mut out = FeatureMap::zeros(x.n, oh, ow, t);
    for n in 0..x.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for j in 0..t {
                    let mut acc = bias.map_or(0.0, |b| b[j]);
                    for a in 0..dh {
                        for b in 0..dw {
                            let iy = (oy * stride + a) as isize - pad as isize;
                            let ix = (ox * stride + b) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            for i in 0..s {
                                acc += k.get(a, b, i, j) * x.get(n, iy as usize, ix as usize, i);
                            }
                        }
                    }
                    let o = out.offset(n, oy, ox, j);
                    out.data[o] = acc;
                }
            }
        }
    }
    out
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `max |a − b| / max |b|`.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    d / max_abs(b).max(f64::MIN_POSITIVE)
}

/// `K ×₃ A ×₄ B` with `A: r3 × S`, `B: r4 × T`, by explicit sums.
pub fn project(k: &Tensor4, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Tensor4 {
    let [dh, dw, s, t] = k.dims();
    let (r3, r4) = (a.nrows(), b.nrows());
    let mut mid = vec![0.0; dh * dw * r3 * t];
    for h in 0..dh {
        for w in 0..dw {
            for p in 0..r3 {
                for j in 0..t {
                    let v: f64 = (0..s).map(|i| a[(p, i)] * k.get(h, w, i, j)).sum();
                    mid[((h * dw + w) * r3 + p) * t + j] = v;
                }
            }
        }
    }
    Tensor4::from_fn([dh, dw, r3, r4], |h, w, p, q| {
        (0..t).map(|j| b[(q, j)] * mid[((h * dw + w) * r3 + p) * t + j]).sum()
    })
}

/// Best relative Tucker-2 error at `(r3, r4)` found by alternating least
/// squares from `restarts` random orthonormal starts.
pub fn als_tucker2_error(k: &Tensor4, r3: usize, r4: usize, restarts: usize, rng: &mut ChaCha8Rng) -> f64 {
    let [_, _, s, t] = k.dims();
    let norm2 = k.sq_norm();
    let mut best = f64::INFINITY;
    for _ in 0..restarts {
        let mut u4 = orthonormal(t, r4, rng);
        let mut prev = f64::INFINITY;
        for _ in 0..200 {
            let y = project(k, &DMatrix::identity(s, s), &u4.transpose());
            let u3 = leading_left(&unfold3(&y), r3);
            let y = project(k, &u3.transpose(), &DMatrix::identity(t, t));
            u4 = leading_left(&unfold4(&y), r4);
            let core = project(k, &u3.transpose(), &u4.transpose());
            let err = ((norm2 - core.sq_norm()).max(0.0) / norm2).sqrt();
            if (prev - err).abs() <= 1e-13 {
                prev = err;
                break;
            }
            prev = err;
        }
        best = best.min(prev);
    }
    best
}

/// `signal + noise` with `k` planted singular values `snr·(√L+√M)·(1 + i/4)`
/// and unit-variance Gaussian noise, so `snr` is the weakest planted value
/// over the noise spectrum edge.
pub fn planted_matrix(l: usize, m: usize, k: usize, snr: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let noise = gaussian(l, m, rng);
    if k == 0 || snr == 0.0 {
        return noise;
    }
    let u = orthonormal(l, k, rng);
    let v = orthonormal(m, k, rng);
    let edge = (l as f64).sqrt() + (m as f64).sqrt();
    let s = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(k, |i, _| snr * edge * (1.0 + i as f64 / 4.0)));
    noise + u * s * v.transpose()
}

pub fn to_dense(m: &DMatrix<f64>) -> nrmf::tensor::DenseMatrix {
    nrmf::tensor::DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn nrmf_bin() -> &'static str {
    env!("CARGO_BIN_EXE_nrmf")
}

pub fn run_cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(nrmf_bin()).args(args).current_dir(cwd).output().expect("spawn nrmf")
}

/// Every file under `dir`, as `(relative path, bytes)`, sorted by path.
pub fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let Ok(entries) = std::fs::read_dir(dir) else { return };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Small toy-network config for CLI runs on the bundled digits.
pub fn quick_toy_config(out_dir: &Path) -> String {
    format!(
        "model = \"toy\"\ntrain_samples = 300\ntest_samples = 100\nseed = 3\nepochs = 1\nlr = 0.05\n\
         alpha = 0.01\nfinetune_epochs = 1\nout_dir = {:?}\n",
        out_dir.to_string_lossy()
    )
}

/// Compressed rows of the ResNet18 layer-wise table: name, S, T, R3, R4,
/// printed parameter count, printed ratio.
pub const TABLE_SEVEN: [(&str, usize, usize, usize, usize, &str, f64); 10] = [
    ("conv1 VBMF", 256, 256, 168, 176, "354.18K", 1.67),
    ("conv1 NRMF", 256, 256, 144, 141, "255.70K", 2.31),
    ("conv2 VBMF", 256, 512, 194, 275, "670.61K", 1.76),
    ("conv2 NRMF", 256, 512, 222, 299, "807.32K", 1.46),
    ("conv3 VBMF", 512, 512, 332, 328, "1.32M", 1.79),
    ("conv3 NRMF", 512, 512, 292, 212, "815.18K", 2.89),
    ("conv4 VBMF", 512, 512, 348, 342, "1.42M", 1.66),
    ("conv4 NRMF", 512, 512, 160, 69, "216.61K", 10.89),
    ("conv5 VBMF", 512, 512, 382, 392, "1.74M", 1.35),
    ("conv5 NRMF", 512, 512, 31, 39, "46.72K", 50.50),
];

/// Exact counts for [`TABLE_SEVEN`], computed by hand from `S·R3 + 9·R3·R4 + R4·T`.
pub const TABLE_SEVEN_COUNTS: [usize; 10] =
    [354_176, 255_696, 670_614, 807_322, 1_317_984, 815_184, 1_424_424, 216_608, 1_743_984, 46_721];

pub fn rank_pair(s: usize, t: usize, r3: usize, r4: usize) -> nrmf::nrmf::RankPair {
    nrmf::nrmf::RankPair {
        layer: 0,
        s,
        t,
        r3,
        r4,
        e1: 1.0,
        e2: 1.0,
        retained1: 1.0,
        retained2: 1.0,
        method: nrmf::nrmf::RankMethod::Nrmf,
    }
}

/// Worst relative error between the analytic gradient of the regularized
/// objective and central differences with step `h`, over every parameter.
/// Relative error is `|a − n| / max(|a|, |n|, 1e-5)`. Returns
/// `(worst, parameters checked)`.
pub fn gradient_check(net: &nrmf::nn::Network, samples: &nrmf::nrmf::Samples, alpha: f64, h: f64) -> (f64, usize) {
    use nrmf::nn::{forward, Layer, ParamGrad};
    use nrmf::nrmf::{nuclear_loss, objective_and_grad, regularized_kernels, Penalty};

    let idx: Vec<usize> = (0..samples.len()).collect();
    let (x, y) = samples.batch(&idx);
    let objective = |n: &nrmf::nn::Network| {
        forward(n, &x, &y).unwrap().0 + alpha * nuclear_loss(&regularized_kernels(n)).unwrap()
    };
    let (_, grads) = objective_and_grad(net, &x, &y, alpha, Penalty::GramTrace).unwrap();

    fn params(layer: &mut Layer) -> Vec<&mut [f64]> {
        match layer {
            Layer::Conv2d(c) => {
                let mut v = vec![c.kernel.data_mut()];
                if let Some(b) = c.bias.as_mut() {
                    v.push(b.as_mut_slice());
                }
                v
            }
            Layer::Linear(l) => vec![l.weight.data_mut(), l.bias.as_mut_slice()],
            _ => Vec::new(),
        }
    }

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = net.clone();
    for id in 0..net.layers().len() {
        let analytic: Vec<Vec<f64>> = match &grads.layers[id] {
            Some(ParamGrad::Conv { kernel, bias }) => {
                let mut v = vec![kernel.data().to_vec()];
                if let Some(b) = bias {
                    v.push(b.clone());
                }
                v
            }
            Some(ParamGrad::Linear { weight, bias }) => vec![weight.data().to_vec(), bias.clone()],
            None => continue,
        };
        for (block, a_block) in analytic.iter().enumerate() {
            for (i, &a) in a_block.iter().enumerate() {
                let v = params(probe.layer_mut(id).unwrap())[block][i];
                params(probe.layer_mut(id).unwrap())[block][i] = v + h;
                let up = objective(&probe);
                params(probe.layer_mut(id).unwrap())[block][i] = v - h;
                let down = objective(&probe);
                params(probe.layer_mut(id).unwrap())[block][i] = v;
                let fd = (up - down) / (2.0 * h);
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-5));
                checked += 1;
            }
        }
    }
    (worst, checked)
}

/// Random 14×14 single-channel images with random labels.
pub fn random_toy_samples(n: usize, seed: u64) -> nrmf::nrmf::Samples {
    let mut r = rng(seed);
    let [h, w, c] = nrmf::nn::TOY_MNIST_INPUT;
    nrmf::nrmf::Samples {
        images: uniform_input(n, h, w, c, &mut r),
        labels: (0..n).map(|_| r.random_range(0..10)).collect(),
    }
}
