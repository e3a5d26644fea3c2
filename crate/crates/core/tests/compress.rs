mod common;

use common::*;
use nrmf::compress::{
    compress_network, dense_conv_params, factorize_conv, factorize_layer, factorized_conv_params, format_compressed,
    format_count, rank_swap, CompressionReport, FactorizedConv, Source,
};
use nrmf::nn::{build_network, load_network, save_network, toy_mnist, Conv2d, Layer, TOY_MNIST_INPUT};
use nrmf::nrmf::{RankMethod, RankPair};
use nrmf::tensor::Tensor4;
use nrmf::tucker::tucker2_reconstruct;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn layerwise_resnet_rows_are_reproduced() {
    for (row, &count) in TABLE_SEVEN.iter().zip(&TABLE_SEVEN_COUNTS) {
        let &(name, s, t, r3, r4, printed, ratio) = row;
        let dense = dense_conv_params(3, 3, s, t);
        let c = factorized_conv_params(3, 3, s, t, r3, r4);
        assert_eq!(c, count, "{name}");
        assert_eq!(format_count(c), printed, "{name}");
        assert!((dense as f64 / c as f64 - ratio).abs() <= 0.01, "{name}");
        assert_eq!(format_compressed(dense, c), format!("{printed} (×{ratio:.2})"), "{name}");
    }
    assert_eq!(format_count(dense_conv_params(3, 3, 256, 256)), "589.82K");
    assert_eq!(format_count(dense_conv_params(3, 3, 256, 512)), "1.18M");
    assert_eq!(format_count(dense_conv_params(3, 3, 512, 512)), "2.36M");
}

#[test]
fn full_rank_pipeline_matches_dense_conv() {
    let mut r = rng(21);
    for case in 0..100 {
        let d = r.random_range(1..4);
        let (s, t) = (r.random_range(1..6), r.random_range(1..6));
        let (stride, pad) = (r.random_range(1..3), r.random_range(0..d));
        let kernel = uniform_kernel([d, d, s, t], &mut r);
        let bias: Vec<f64> = (0..t).map(|_| r.random_range(-1.0..1.0)).collect();
        let conv = Conv2d::new(kernel.clone(), Some(bias.clone()), stride, pad);
        let x = uniform_input(2, d + 4, d + 3, s, &mut r);
        let f = factorize_conv(&conv, &RankPair::full(0, &kernel)).unwrap();
        let got = f.forward(&x).unwrap();
        let want = naive_conv(&kernel, Some(&bias), &x, stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(rel_diff(&got.data, &want.data) <= 1e-8, "case {case}");
    }
}

#[test]
fn truncated_pipeline_computes_the_reconstructed_kernel() {
    let mut r = rng(22);
    for _ in 0..20 {
        let (s, t) = (r.random_range(2..8), r.random_range(2..8));
        let kernel = uniform_kernel([3, 3, s, t], &mut r);
        let f = factorize_layer(&kernel, &rank_pair(s, t, s / 2, t / 2)).unwrap();
        let x = uniform_input(1, 6, 5, s, &mut r);
        let approx = tucker2_reconstruct(&f.to_factors()).unwrap();
        assert!(rel_diff(&f.forward(&x).unwrap().data, &naive_conv(&approx, None, &x, 1, 0).data) <= 1e-10);
    }
}

#[test]
fn planted_low_rank_kernel_is_exact_at_its_ranks() {
    let mut r = rng(23);
    let core = uniform_kernel([3, 3, 2, 3], &mut r);
    let (u3, u4) = (orthonormal(6, 2, &mut r), orthonormal(7, 3, &mut r));
    let kernel = Tensor4::from_fn([3, 3, 6, 7], |h, w, i, j| {
        let mut v = 0.0;
        for a in 0..2 {
            for b in 0..3 {
                v += core.get(h, w, a, b) * u3[(i, a)] * u4[(j, b)];
            }
        }
        v
    });
    let f = factorize_layer(&kernel, &rank_pair(6, 7, 2, 3)).unwrap();
    assert!(f.reconstruct().unwrap().distance(&kernel) <= 1e-10 * kernel.frobenius_norm());
    let x = uniform_input(2, 5, 5, 6, &mut r);
    assert!(rel_diff(&f.forward(&x).unwrap().data, &naive_conv(&kernel, None, &x, 1, 0).data) <= 1e-8);
}

#[test]
fn worked_rank_swap_shapes() {
    let mut r = rng(24);
    let kernel = uniform_kernel([3, 3, 128, 128], &mut r);
    let f = factorize_layer(&kernel, &rank_pair(128, 128, 100, 120)).unwrap();
    let g = rank_swap(&f, 110, 90).unwrap();
    assert_eq!(g.first.dims(), [1, 1, 128, 110]);
    assert_eq!(g.mid.dims(), [3, 3, 110, 90]);
    assert_eq!(g.last.dims(), [1, 1, 90, 128]);
    for i in 0..128 {
        for a in 0..110 {
            let want = if a < 100 { f.first.get(0, 0, i, a) } else { 0.0 };
            assert_eq!(g.first.get(0, 0, i, a).to_bits(), want.to_bits());
        }
    }
    for (h, w) in [(0, 0), (1, 2), (2, 1)] {
        for a in 0..110 {
            for b in 0..90 {
                let want = if a < 100 { f.mid.get(h, w, a, b) } else { 0.0 };
                assert_eq!(g.mid.get(h, w, a, b).to_bits(), want.to_bits());
            }
        }
    }
    for b in 0..90 {
        for j in 0..128 {
            assert_eq!(g.last.get(0, 0, b, j).to_bits(), f.last.get(0, 0, b, j).to_bits());
        }
    }
    assert!(rank_swap(&f, 0, 90).is_err());
    assert!(rank_swap(&f, 110, 129).is_err());
}

#[test]
fn padding_ranks_keeps_the_function() {
    let mut r = rng(25);
    let kernel = uniform_kernel([3, 3, 5, 6], &mut r);
    let f = factorize_layer(&kernel, &rank_pair(5, 6, 2, 3)).unwrap();
    let g = rank_swap(&f, 5, 6).unwrap();
    let x = uniform_input(2, 5, 5, 5, &mut r);
    assert_eq!(f.forward(&x).unwrap(), g.forward(&x).unwrap());
    assert_eq!(rank_swap(&g, 2, 3).unwrap(), f);
}

#[test]
fn compressed_network_survives_a_checkpoint_round_trip() {
    let net = build_network(&toy_mnist(), TOY_MNIST_INPUT, 26).unwrap();
    let ranks: Vec<RankPair> = net
        .regularized_layers()
        .into_iter()
        .map(|id| {
            let k = &net.conv(id).unwrap().kernel;
            RankPair { layer: id, method: RankMethod::Vbmf, ..rank_pair(k.s(), k.t(), 1.max(k.s() / 2), 1.max(k.t() / 2)) }
        })
        .collect();
    let (small, report) = compress_network(&net, &ranks, Source::FreshDecompose).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_network(&small, dir.path()).unwrap();
    let back = load_network(dir.path()).unwrap();
    assert_eq!(back.layers(), small.layers());
    assert_eq!(CompressionReport::from_network(&back).unwrap(), report);
    // non-spatial and linear parameters are untouched
    let dense_rest = net.param_count() - net.regularized_layers().iter().map(|&i| net.conv(i).unwrap().kernel.len()).sum::<usize>();
    let small_rest = small.param_count() - report.total_compressed();
    assert_eq!(dense_rest, small_rest);
    let triples = small.layers().iter().filter(|l| matches!(l, Layer::Conv2d(c) if c.provenance.is_some())).count();
    assert_eq!(triples, 3 * ranks.len());
    let (_, prov) = FactorizedConv::from_layers(&small.layers()[0..3]).unwrap();
    assert_eq!((prov.original_layer, prov.method), (0, RankMethod::Vbmf));
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(128) })]

    #[test]
    fn param_count_grows_with_each_rank(
        d in 1usize..6, s in 1usize..600, t in 1usize..600, a in 0.0f64..1.0, b in 0.0f64..1.0,
    ) {
        let r3 = 1 + (a * (s - 1) as f64) as usize;
        let r4 = 1 + (b * (t - 1) as f64) as usize;
        let c = factorized_conv_params(d, d, s, t, r3, r4);
        prop_assert_eq!(c, s * r3 + d * d * r3 * r4 + r4 * t);
        if r3 < s {
            prop_assert!(factorized_conv_params(d, d, s, t, r3 + 1, r4) > c);
        }
        if r4 < t {
            prop_assert!(factorized_conv_params(d, d, s, t, r3, r4 + 1) > c);
        }
    }
}
