//! Empirical variational Bayesian matrix factorization (global analytic
//! solution, noise variance learned) as a rank estimator for unfoldings.
//!
//! For an `L × M` observation with `L ≤ M`, `α = L/M` and singular values
//! `γ_h`, the free energy as a function of the noise variance `σ²` is, up to
//! a constant,
//!
//! ```text
//! F(σ²) = Σ_h x_h + L log σ² + Σ_{x_h > x̲} ψ(x_h),   x_h = γ_h² / (M σ²)
//! ψ(x)  = log(τ + 1) + α log(τ/α + 1) − τ
//! τ(x)  = ½ (x − (1 + α) + √((x − (1 + α))² − 4α))
//! ```
//!
//! with `x̲ = (1 + τ̲)(1 + α/τ̲)` and `τ̲` the root of
//! `log(τ+1)/τ + α log(τ/α+1)/τ = 1`. `ψ(x̲) = 0`, so `F` is continuous and
//! only has kinks where some `x_h` crosses `x̲`.

use crate::eig::{sym_eig, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::nrmf::{RankMethod, RankPair};
use crate::tensor::{matricize_mode3, matricize_mode4, DenseMatrix, Tensor4};

/// Relative bracket width at which the σ² search stops.
pub const SIGMA2_TOL: f64 = 1e-12;
/// Grid points per smooth piece before golden-section refinement.
const GRID: usize = 24;
/// σ² is never searched below this fraction of its upper bound.
const SIGMA2_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct VbmfEstimate {
    pub rank: usize,
    pub sigma2: f64,
    /// All observed singular values, non-increasing.
    pub singular_values: Vec<f64>,
    /// Posterior-mean estimates of the retained singular values.
    pub shrunk: Vec<f64>,
    /// Singular values above this are retained.
    pub threshold: f64,
}

/// `τ̲` for aspect ratio `α ∈ (0, 1]`.
pub fn tau_lower(alpha: f64) -> f64 {
    let phi = |z: f64| (z + 1.0).ln() / z - 0.5;
    let f = |tau: f64| phi(tau) + phi(tau / alpha);
    // f decreases from 1 to -1; bracket and bisect.
    let (mut lo, mut hi) = (1e-12, 1.0);
    while f(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn tau_of(x: f64, alpha: f64) -> f64 {
    let b = x - (1.0 + alpha);
    0.5 * (b + (b * b - 4.0 * alpha).max(0.0).sqrt())
}

struct Problem {
    l: f64,
    m: f64,
    alpha: f64,
    x_lower: f64,
    /// Squared singular values, non-increasing.
    g2: Vec<f64>,
}

impl Problem {
    fn free_energy(&self, sigma2: f64) -> f64 {
        let mut f = self.l * sigma2.ln();
        for &g in &self.g2 {
            let x = g / (self.m * sigma2);
            f += x;
            if x > self.x_lower {
                let tau = tau_of(x, self.alpha);
                f += (tau + 1.0).ln() + self.alpha * (tau / self.alpha + 1.0).ln() - tau;
            }
        }
        f
    }

    /// Minimize `F(e^u)` over `u ∈ [a, b]`, a smooth piece.
    fn minimize_piece(&self, a: f64, b: f64) -> (f64, f64) {
        let f = |u: f64| self.free_energy(u.exp());
        let step = (b - a) / GRID as f64;
        let mut best = (a, f(a));
        let mut best_i = 0;
        for i in 1..=GRID {
            let u = if i == GRID { b } else { a + step * i as f64 };
            let v = f(u);
            if v < best.1 {
                best = (u, v);
                best_i = i;
            }
        }
        let mut lo = a + step * best_i.saturating_sub(1) as f64;
        let mut hi = if best_i + 1 >= GRID { b } else { a + step * (best_i + 1) as f64 };
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = hi - g * (hi - lo);
        let mut d = lo + g * (hi - lo);
        let (mut fc, mut fd) = (f(c), f(d));
        // u is log σ², so a width in u is a relative width in σ².
        while hi - lo > SIGMA2_TOL {
            if fc <= fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - g * (hi - lo);
                fc = f(c);
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + g * (hi - lo);
                fd = f(d);
            }
        }
        for (u, v) in [(c, fc), (d, fd)] {
            if v < best.1 {
                best = (u, v);
            }
        }
        best
    }
}

/// Non-increasing singular values of `y`, from the Gram of its shorter side.
fn singular_values(y: &DenseMatrix) -> Result<Vec<f64>> {
    let g = if y.rows() <= y.cols() { y.gram() } else { y.transpose().gram() };
    let eig = sym_eig(&g, DEFAULT_TOL)?.clamp_nonnegative();
    Ok(eig.eigenvalues.iter().map(|v| v.sqrt()).collect())
}

pub fn vbmf_rank(y: &DenseMatrix) -> Result<VbmfEstimate> {
    let (l, m) = (y.rows().min(y.cols()), y.rows().max(y.cols()));
    if l == 0 {
        return Err(Error::DegenerateInput("empty observation matrix".into()));
    }
    let gamma = singular_values(y)?;
    let total: f64 = gamma.iter().map(|g| g * g).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateInput("observation matrix is zero".into()));
    }
    let (lf, mf) = (l as f64, m as f64);
    let alpha = lf / mf;
    let tau = tau_lower(alpha);
    let x_lower = (1.0 + tau) * (1.0 + alpha / tau);
    let p = Problem { l: lf, m: mf, alpha, x_lower, g2: gamma.iter().map(|g| g * g).collect() };

    let upper = total / (lf * mf);
    // Components beyond ē cannot all be signal.
    let e_bar = ((lf / (1.0 + alpha)).ceil() as usize).saturating_sub(1).min(l);
    let lower = if e_bar < l {
        let tail = &p.g2[e_bar..];
        (p.g2[e_bar] / (mf * x_lower)).max(tail.iter().sum::<f64>() / tail.len() as f64 / mf)
    } else {
        0.0
    };
    let lower = lower.max(upper * SIGMA2_FLOOR).min(upper);

    let sigma2 = if lower >= upper {
        upper
    } else {
        let (a, b) = (lower.ln(), upper.ln());
        let mut cuts = vec![a];
        for &g in &p.g2 {
            let k = (g / (mf * x_lower)).ln();
            if k > a && k < b {
                cuts.push(k);
            }
        }
        cuts.push(b);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut best = (a, p.free_energy(lower));
        for w in cuts.windows(2) {
            let cand = p.minimize_piece(w[0], w[1]);
            if cand.1 < best.1 {
                best = cand;
            }
        }
        best.0.exp()
    };

    let threshold = (mf * sigma2 * x_lower).sqrt();
    let rank = gamma.iter().filter(|&&g| g > threshold).count();
    let shrunk = gamma[..rank]
        .iter()
        .map(|&g| {
            let g2 = g * g;
            let a = 1.0 - (lf + mf) * sigma2 / g2;
            let disc = (a * a - 4.0 * lf * mf * sigma2 * sigma2 / (g2 * g2)).max(0.0);
            0.5 * g * (a + disc.sqrt())
        })
        .collect();
    Ok(VbmfEstimate { rank, sigma2, singular_values: gamma, shrunk, threshold })
}

/// VBMF ranks of the mode-3 and mode-4 unfoldings. A zero estimate is raised
/// to 1 so the layer stays constructible.
pub fn vbmf_rank_pair(kernel: &Tensor4) -> Result<RankPair> {
    let a = vbmf_rank(&matricize_mode3(kernel))?;
    let b = vbmf_rank(&matricize_mode4(kernel))?;
    let kept = |est: &VbmfEstimate, r: usize| {
        let e: f64 = est.singular_values.iter().map(|g| g * g).sum();
        let k: f64 = est.singular_values[..r].iter().map(|g| g * g).sum();
        (e, k / e)
    };
    let (r3, r4) = (a.rank.max(1), b.rank.max(1));
    let (e1, retained1) = kept(&a, r3);
    let (e2, retained2) = kept(&b, r4);
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
        method: RankMethod::Vbmf,
    })
}

/// [`vbmf_rank_pair`] for every regularized conv layer of a network.
pub fn vbmf_network_ranks(net: &crate::nn::Network) -> Result<Vec<RankPair>> {
    net.regularized_layers()
        .into_iter()
        .map(|id| {
            let mut rp = vbmf_rank_pair(&net.conv(id)?.kernel)?;
            rp.layer = id;
            Ok(rp)
        })
        .collect()
}
