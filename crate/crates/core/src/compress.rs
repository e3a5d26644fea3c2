//! Replace spatial conv layers by 1×1 / D×D / 1×1 conv triples built from a
//! Tucker-2 decomposition, reshape existing triples to new ranks, and count
//! parameters.

use std::io::Write;

use crate::error::{Error, Result};
use crate::nn::{conv2d_forward, Conv2d, FeatureMap, Layer, Network, Provenance, Stage};
use crate::nrmf::{RankMethod, RankPair};
use crate::tensor::Tensor4;
use crate::tucker::{check_ranks, tucker2_decompose, tucker2_reconstruct, Tucker2Factors};

/// A conv layer factorized into three sequential convs.
///
/// `first[0,0,s,a] = U3[s,a]`, `mid` is the core, `last[0,0,b,t] = U4[t,b]`.
/// Stride and padding apply to the middle stage; the bias sits on the last.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedConv {
    pub first: Tensor4,
    pub mid: Tensor4,
    pub last: Tensor4,
    pub bias: Option<Vec<f64>>,
    pub stride: usize,
    pub pad: usize,
}

impl FactorizedConv {
    pub fn from_factors(f: &Tucker2Factors, bias: Option<Vec<f64>>, stride: usize, pad: usize) -> Self {
        let (r3, r4) = f.ranks();
        let (s, t) = (f.u3.rows(), f.u4.rows());
        let first = Tensor4::from_fn([1, 1, s, r3], |_, _, i, a| f.u3.get(i, a));
        let last = Tensor4::from_fn([1, 1, r4, t], |_, _, b, j| f.u4.get(j, b));
        FactorizedConv { first, mid: f.core.clone(), last, bias, stride, pad }
    }

    /// `(S, T)` of the layer this stands in for.
    pub fn channels(&self) -> (usize, usize) {
        (self.first.s(), self.last.t())
    }

    pub fn ranks(&self) -> (usize, usize) {
        (self.first.t(), self.last.s())
    }

    /// Dims of the equivalent dense kernel.
    pub fn kernel_dims(&self) -> [usize; 4] {
        [self.mid.d_h(), self.mid.d_w(), self.first.s(), self.last.t()]
    }

    /// Kernel parameters of the three stages, bias excluded.
    pub fn param_count(&self) -> usize {
        self.first.len() + self.mid.len() + self.last.len()
    }

    pub fn to_factors(&self) -> Tucker2Factors {
        let (s, t) = self.channels();
        let (r3, r4) = self.ranks();
        Tucker2Factors {
            u3: crate::tensor::DenseMatrix::from_fn(s, r3, |i, a| self.first.get(0, 0, i, a)),
            core: self.mid.clone(),
            u4: crate::tensor::DenseMatrix::from_fn(t, r4, |j, b| self.last.get(0, 0, b, j)),
        }
    }

    /// The dense kernel the triple computes.
    pub fn reconstruct(&self) -> Result<Tensor4> {
        tucker2_reconstruct(&self.to_factors())
    }

    /// Run the three convs in sequence.
    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        let x = conv2d_forward(&self.first, None, input, 1, 0)?;
        let x = conv2d_forward(&self.mid, None, &x, self.stride, self.pad)?;
        conv2d_forward(&self.last, self.bias.as_deref(), &x, 1, 0)
    }

    /// Three conv layers tagged with where they came from.
    pub fn to_layers(&self, original_layer: usize, method: RankMethod) -> Vec<Layer> {
        let (r3, r4) = self.ranks();
        let tag = |stage| Some(Provenance { original_layer, r3, r4, method, stage });
        vec![
            Layer::Conv2d(Conv2d { kernel: self.first.clone(), bias: None, stride: 1, pad: 0, provenance: tag(Stage::First) }),
            Layer::Conv2d(Conv2d {
                kernel: self.mid.clone(),
                bias: None,
                stride: self.stride,
                pad: self.pad,
                provenance: tag(Stage::Mid),
            }),
            Layer::Conv2d(Conv2d {
                kernel: self.last.clone(),
                bias: self.bias.clone(),
                stride: 1,
                pad: 0,
                provenance: tag(Stage::Last),
            }),
        ]
    }

    /// Rebuild from three consecutive layers produced by [`Self::to_layers`].
    pub fn from_layers(layers: &[Layer]) -> Result<(Self, Provenance)> {
        let bad = || Error::Format("expected a first/mid/last factorized conv triple".into());
        let conv = |i: usize, stage: Stage| match layers.get(i) {
            Some(Layer::Conv2d(c)) if c.provenance.as_ref().map(|p| p.stage) == Some(stage) => Ok(c),
            _ => Err(bad()),
        };
        let (a, b, c) = (conv(0, Stage::First)?, conv(1, Stage::Mid)?, conv(2, Stage::Last)?);
        let prov = a.provenance.clone().ok_or_else(bad)?;
        let f = FactorizedConv {
            first: a.kernel.clone(),
            mid: b.kernel.clone(),
            last: c.kernel.clone(),
            bias: c.bias.clone(),
            stride: b.stride,
            pad: b.pad,
        };
        let [_, _, r3, r4] = f.mid.dims();
        if f.first.d_h() != 1 || f.last.d_h() != 1 || f.first.t() != r3 || f.last.s() != r4 {
            return Err(Error::Shape("factorized stages do not chain".into()));
        }
        Ok((f, prov))
    }
}

/// Factorize a bare kernel (stride 1, no padding, no bias).
pub fn factorize_layer(kernel: &Tensor4, ranks: &RankPair) -> Result<FactorizedConv> {
    check_rank_pair(kernel, ranks)?;
    Ok(FactorizedConv::from_factors(&tucker2_decompose(kernel, ranks.r3, ranks.r4)?, None, 1, 0))
}

/// Factorize a conv layer, keeping its stride, padding and bias.
pub fn factorize_conv(conv: &Conv2d, ranks: &RankPair) -> Result<FactorizedConv> {
    check_rank_pair(&conv.kernel, ranks)?;
    let f = tucker2_decompose(&conv.kernel, ranks.r3, ranks.r4)?;
    Ok(FactorizedConv::from_factors(&f, conv.bias.clone(), conv.stride, conv.pad))
}

fn check_rank_pair(kernel: &Tensor4, ranks: &RankPair) -> Result<()> {
    if (ranks.s, ranks.t) != (kernel.s(), kernel.t()) {
        return Err(Error::Shape(format!(
            "ranks are for {}→{} channels, kernel is {:?}",
            ranks.s,
            ranks.t,
            kernel.dims()
        )));
    }
    Ok(())
}

/// Copy the overlap of `src` into a zero tensor of shape `dims`.
fn resize(src: &Tensor4, dims: [usize; 4]) -> Tensor4 {
    let [dh, dw, s, t] = dims;
    let mut out = Tensor4::zeros(dims);
    for h in 0..dh.min(src.d_h()) {
        for w in 0..dw.min(src.d_w()) {
            for i in 0..s.min(src.s()) {
                for j in 0..t.min(src.t()) {
                    out.set(h, w, i, j, src.get(h, w, i, j));
                }
            }
        }
    }
    out
}

/// Move a triple to new ranks. Each rank is padded with zero channels or has
/// its trailing channels dropped, independently: the first stage's output
/// and the middle stage's input follow `r3`, the middle stage's output and
/// the last stage's input follow `r4`.
pub fn rank_swap(f: &FactorizedConv, r3: usize, r4: usize) -> Result<FactorizedConv> {
    let (s, t) = f.channels();
    check_ranks(s, t, r3, r4)?;
    Ok(FactorizedConv {
        first: resize(&f.first, [1, 1, s, r3]),
        mid: resize(&f.mid, [f.mid.d_h(), f.mid.d_w(), r3, r4]),
        last: resize(&f.last, [1, 1, r4, t]),
        bias: f.bias.clone(),
        stride: f.stride,
        pad: f.pad,
    })
}

pub fn dense_conv_params(d_h: usize, d_w: usize, s: usize, t: usize) -> usize {
    d_h * d_w * s * t
}

pub fn factorized_conv_params(d_h: usize, d_w: usize, s: usize, t: usize, r3: usize, r4: usize) -> usize {
    s * r3 + d_h * d_w * r3 * r4 + r4 * t
}

/// `46721 → "46.72K"`, `2359296 → "2.36M"`.
pub fn format_count(n: usize) -> String {
    let x = n as f64;
    if n >= 1_000_000 {
        format!("{:.2}M", x / 1e6)
    } else if n >= 1_000 {
        format!("{:.2}K", x / 1e3)
    } else {
        n.to_string()
    }
}

/// `"46.72K (×50.50)"`.
pub fn format_compressed(original: usize, compressed: usize) -> String {
    format!("{} (×{:.2})", format_count(compressed), original as f64 / compressed as f64)
}

/// Where factorized weights come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// Tucker-2 decompose each dense spatial conv.
    FreshDecompose,
    /// Pad or truncate existing factorized triples.
    RankSwap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    /// Layer id in the uncompressed network.
    pub layer: usize,
    pub method: RankMethod,
    pub dims: [usize; 4],
    pub r3: usize,
    pub r4: usize,
    pub original: usize,
    pub compressed: usize,
}

impl ReportRow {
    pub fn ratio(&self) -> f64 {
        self.original as f64 / self.compressed as f64
    }
}

/// Per-layer kernel parameter counts; biases are not counted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompressionReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_CSV_HEADER: &str = "layer,method,d_h,d_w,S,T,r3,r4,original_params,compressed_params,ratio";

impl CompressionReport {
    pub fn total_original(&self) -> usize {
        self.rows.iter().map(|r| r.original).sum()
    }

    pub fn total_compressed(&self) -> usize {
        self.rows.iter().map(|r| r.compressed).sum()
    }

    /// Rows for every factorized triple in a network, from provenance tags.
    pub fn from_network(net: &Network) -> Result<Self> {
        let layers = net.layers();
        let mut rows = Vec::new();
        let mut i = 0;
        while i < layers.len() {
            let first = matches!(&layers[i], Layer::Conv2d(c) if c.provenance.as_ref().is_some_and(|p| p.stage == Stage::First));
            if first {
                let (f, prov) = FactorizedConv::from_layers(&layers[i..])?;
                rows.push(row_for(&f, prov.original_layer, prov.method));
                i += 3;
            } else {
                i += 1;
            }
        }
        Ok(CompressionReport { rows })
    }

    /// One row per layer then a `total` row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{REPORT_CSV_HEADER}")?;
        for r in &self.rows {
            let [dh, dw, s, t] = r.dims;
            writeln!(
                w,
                "{},{},{dh},{dw},{s},{t},{},{},{},{},{:.6}",
                r.layer,
                r.method,
                r.r3,
                r.r4,
                r.original,
                r.compressed,
                r.ratio()
            )?;
        }
        let (o, c) = (self.total_original(), self.total_compressed());
        let ratio = if c == 0 { 0.0 } else { o as f64 / c as f64 };
        writeln!(w, "total,,,,,,,,{o},{c},{ratio:.6}")?;
        Ok(())
    }

    /// Human-readable table in `K`/`M` units.
    pub fn display_table(&self) -> String {
        let mut s = String::from("layer  method  dims              ranks       original   compressed\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<6} {:<7} {:<17} {:<11} {:<10} {}\n",
                r.layer,
                r.method,
                format!("{:?}", r.dims),
                format!("({}, {})", r.r3, r.r4),
                format_count(r.original),
                format_compressed(r.original, r.compressed)
            ));
        }
        let (o, c) = (self.total_original(), self.total_compressed());
        if c > 0 {
            s.push_str(&format!(
                "{:<6} {:<7} {:<17} {:<11} {:<10} {}\n",
                "total",
                "",
                "",
                "",
                format_count(o),
                format_compressed(o, c)
            ));
        }
        s
    }
}

fn row_for(f: &FactorizedConv, layer: usize, method: RankMethod) -> ReportRow {
    let dims = f.kernel_dims();
    let (r3, r4) = f.ranks();
    ReportRow {
        layer,
        method,
        dims,
        r3,
        r4,
        original: dense_conv_params(dims[0], dims[1], dims[2], dims[3]),
        compressed: f.param_count(),
    }
}

/// Factorize every spatial conv of `net` at the ranks in `ranks` (keyed by
/// layer id in the uncompressed network). 1×1 convs and linear layers are
/// left alone. With [`Source::RankSwap`] the network must already be
/// factorized and each triple is padded/truncated to its new ranks.
pub fn compress_network(net: &Network, ranks: &[RankPair], source: Source) -> Result<(Network, CompressionReport)> {
    let lookup = |id: usize| ranks.iter().find(|r| r.layer == id).ok_or(Error::MissingRank(id));
    let layers = net.layers();
    let mut out = Vec::with_capacity(layers.len() + 2 * ranks.len());
    let mut rows = Vec::new();
    let mut i = 0;
    while i < layers.len() {
        let layer = &layers[i];
        let Layer::Conv2d(c) = layer else {
            out.push(layer.clone());
            i += 1;
            continue;
        };
        if c.provenance.is_none() && !c.kernel.is_spatial() {
            out.push(layer.clone());
            i += 1;
            continue;
        }
        match (&c.provenance, source) {
            (None, Source::FreshDecompose) => {
                let rp = lookup(i)?;
                let f = factorize_conv(c, rp)?;
                rows.push(row_for(&f, i, rp.method));
                out.extend(f.to_layers(i, rp.method));
                i += 1;
            }
            (Some(p), Source::RankSwap) if p.stage == Stage::First => {
                let (f, prov) = FactorizedConv::from_layers(&layers[i..])?;
                let rp = lookup(prov.original_layer)?;
                if (rp.s, rp.t) != f.channels() {
                    return Err(Error::Shape(format!("ranks for layer {} do not match its channels", prov.original_layer)));
                }
                let g = rank_swap(&f, rp.r3, rp.r4)?;
                rows.push(row_for(&g, prov.original_layer, rp.method));
                out.extend(g.to_layers(prov.original_layer, rp.method));
                i += 3;
            }
            (None, Source::RankSwap) => {
                return Err(Error::Config(format!("layer {i} is not factorized; rank swap needs a factorized network")));
            }
            (Some(_), _) => {
                return Err(Error::Config(format!(
                    "layer {i} is already factorized; use a rank swap or the uncompressed network"
                )));
            }
        }
    }
    let mut compressed = net.clone();
    compressed.replace_layers(out)?;
    Ok((compressed, CompressionReport { rows }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_network, toy_three_conv};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_kernel(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
        Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn pair(s: usize, t: usize, r3: usize, r4: usize) -> RankPair {
        RankPair { layer: 0, s, t, r3, r4, e1: 0.0, e2: 0.0, retained1: 1.0, retained2: 1.0, method: RankMethod::Nrmf }
    }

    #[test]
    fn table_seven_conv5_nrmf() {
        assert_eq!(dense_conv_params(3, 3, 512, 512), 2_359_296);
        let c = factorized_conv_params(3, 3, 512, 512, 31, 39);
        assert_eq!(c, 46_721);
        assert_eq!(format_compressed(2_359_296, c), "46.72K (×50.50)");
        assert_eq!(format_count(2_359_296), "2.36M");
    }

    #[test]
    fn factorized_param_count_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let k = random_kernel([3, 3, 6, 8], &mut rng);
        let f = factorize_layer(&k, &pair(6, 8, 2, 5)).unwrap();
        assert_eq!(f.param_count(), factorized_conv_params(3, 3, 6, 8, 2, 5));
        assert_eq!(f.first.dims(), [1, 1, 6, 2]);
        assert_eq!(f.mid.dims(), [3, 3, 2, 5]);
        assert_eq!(f.last.dims(), [1, 1, 5, 8]);
    }

    #[test]
    fn worked_rank_swap_shapes() {
        let f = FactorizedConv {
            first: Tensor4::zeros([1, 1, 128, 100]),
            mid: Tensor4::zeros([3, 3, 100, 120]),
            last: Tensor4::zeros([1, 1, 120, 256]),
            bias: None,
            stride: 1,
            pad: 1,
        };
        let g = rank_swap(&f, 110, 90).unwrap();
        assert_eq!(g.first.dims(), [1, 1, 128, 110]);
        assert_eq!(g.mid.dims(), [3, 3, 110, 90]);
        assert_eq!(g.last.dims(), [1, 1, 90, 256]);
        assert!(matches!(rank_swap(&f, 0, 90), Err(Error::RankBounds { .. })));
        assert!(matches!(rank_swap(&f, 129, 90), Err(Error::RankBounds { .. })));
    }

    #[test]
    fn rank_swap_identity_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let k = random_kernel([3, 3, 6, 8], &mut rng);
        let f = factorize_layer(&k, &pair(6, 8, 3, 4)).unwrap();
        assert_eq!(rank_swap(&f, 3, 4).unwrap(), f);
        let up = rank_swap(&f, 5, 4).unwrap();
        assert!(up.first.data().chunks(5).all(|row| row[3] == 0.0 && row[4] == 0.0));
        assert_eq!(rank_swap(&up, 3, 4).unwrap(), f);
    }

    #[test]
    fn padded_swap_computes_the_same_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let k = random_kernel([3, 3, 4, 5], &mut rng);
        let f = factorize_layer(&k, &pair(4, 5, 2, 3)).unwrap();
        let g = rank_swap(&f, 4, 5).unwrap();
        assert!(g.reconstruct().unwrap().distance(&f.reconstruct().unwrap()) < 1e-12);
    }

    #[test]
    fn full_rank_network_compression_is_lossless() {
        let net = build_network(&toy_three_conv(), [8, 8, 2], 3).unwrap();
        let ranks: Vec<RankPair> = net
            .regularized_layers()
            .iter()
            .map(|&id| RankPair::full(id, &net.conv(id).unwrap().kernel))
            .collect();
        let (small, report) = compress_network(&net, &ranks, Source::FreshDecompose).unwrap();
        assert_eq!(small.layers().len(), net.layers().len() + 4);
        assert_eq!(report.rows.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let x = FeatureMap::from_vec(3, 8, 8, 2, (0..384).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a = net.predict(&x).unwrap();
        let b = small.predict(&x).unwrap();
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() < 1e-9);
        }
        assert_eq!(CompressionReport::from_network(&small).unwrap(), report);
    }

    #[test]
    fn missing_rank_and_wrong_source() {
        let net = build_network(&toy_three_conv(), [8, 8, 2], 3).unwrap();
        let only_first = vec![RankPair::full(0, &net.conv(0).unwrap().kernel)];
        assert!(matches!(compress_network(&net, &only_first, Source::FreshDecompose), Err(Error::MissingRank(3))));
        assert!(matches!(compress_network(&net, &only_first, Source::RankSwap), Err(Error::Config(_))));
    }

    #[test]
    fn rank_swap_on_network_retags_ranks() {
        let net = build_network(&toy_three_conv(), [8, 8, 2], 3).unwrap();
        let ranks = vec![pair(2, 4, 2, 3), RankPair { layer: 3, ..pair(4, 5, 3, 4) }];
        let (small, _) = compress_network(&net, &ranks, Source::FreshDecompose).unwrap();
        let swap = vec![pair(2, 4, 1, 4), RankPair { layer: 3, ..pair(4, 5, 4, 2) }];
        let (swapped, report) = compress_network(&small, &swap, Source::RankSwap).unwrap();
        assert_eq!(report.rows.iter().map(|r| (r.layer, r.r3, r.r4)).collect::<Vec<_>>(), vec![(0, 1, 4), (3, 4, 2)]);
        assert_eq!(CompressionReport::from_network(&swapped).unwrap(), report);
    }

    #[test]
    fn report_csv_totals() {
        let report = CompressionReport {
            rows: vec![
                ReportRow { layer: 0, method: RankMethod::Nrmf, dims: [3, 3, 4, 4], r3: 2, r4: 2, original: 144, compressed: 52 },
                ReportRow { layer: 3, method: RankMethod::Nrmf, dims: [3, 3, 4, 4], r3: 1, r4: 1, original: 144, compressed: 17 },
            ],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().last().unwrap(), "total,,,,,,,,288,69,4.173913");
    }
}
