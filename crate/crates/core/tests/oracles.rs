//! Kernel results checked against straight-line reference loops that share
//! no code with the engine, plus bitwise agreement between the parallel
//! and sequential dispatch paths.

use dsdn_core::graph::Graph;
use dsdn_core::kernels::conv2d::{conv2d_fwd, Conv2dSpec};
use dsdn_core::kernels::conv3d::{conv3d_fwd, Conv3dSpec};
use dsdn_core::kernels::matmul::matmul_fwd;
use dsdn_core::parallel::set_parallel;
use dsdn_core::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reference_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..25 {
        let m = rng.gen_range(1..8);
        let k = rng.gen_range(1..8);
        let n = rng.gen_range(1..8);
        let a = Array::<f64>::randn(&mut rng, &[m, k]);
        let b = Array::<f64>::randn(&mut rng, &[k, n]);
        let mut out = vec![0.0; m * n];
        matmul_fwd(a.data(), b.data(), 1, m, k, n, false, &mut out);
        let expect = reference_matmul(a.data(), b.data(), m, k, n);
        for (o, e) in out.iter().zip(expect.iter()) {
            assert!((o - e).abs() <= 1e-12, "matmul disagrees: {o} vs {e}");
        }
    }
}

#[test]
fn matmul_known_values() {
    // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
    let a = [1.0f64, 2.0, 3.0, 4.0];
    let b = [5.0f64, 6.0, 7.0, 8.0];
    let mut out = vec![0.0; 4];
    matmul_fwd(&a, &b, 1, 2, 2, 2, false, &mut out);
    assert_eq!(out, vec![19.0, 22.0, 43.0, 50.0]);
}

#[allow(clippy::too_many_arguments)]
fn reference_conv2d(
    x: &[f64],
    w: &[f64],
    b: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Vec<f64> {
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for bi in 0..b {
        for oc in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..cin {
                        for khi in 0..kh {
                            for kwi in 0..kw {
                                let ih = oh * stride.0 + khi;
                                let iw = ow * stride.1 + kwi;
                                if ih < pad.0 || iw < pad.1 {
                                    continue;
                                }
                                let (ih, iw) = (ih - pad.0, iw - pad.1);
                                if ih >= h || iw >= wd {
                                    continue;
                                }
                                acc += w[((oc * cin + ic) * kh + khi) * kw + kwi]
                                    * x[((bi * cin + ic) * h + ih) * wd + iw];
                            }
                        }
                    }
                    out[((bi * cout + oc) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_nested_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..25 {
        let b = rng.gen_range(1..3);
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let kh = rng.gen_range(1..4);
        let kw = rng.gen_range(1..4);
        let h = rng.gen_range(kh..kh + 4);
        let wd = rng.gen_range(kw..kw + 4);
        let stride = (rng.gen_range(1..3), rng.gen_range(1..3));
        let pad = (rng.gen_range(0..2), rng.gen_range(0..2));
        let x = Array::<f64>::randn(&mut rng, &[b, cin, h, wd]);
        let w = Array::<f64>::randn(&mut rng, &[cout, cin, kh, kw]);
        let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
        let mut out = vec![0.0; b * cout * ho * wo];
        conv2d_fwd(
            x.data(),
            w.data(),
            None,
            (b, cin, h, wd),
            (cout, kh, kw),
            Conv2dSpec {
                stride,
                padding: pad,
                groups: 1,
            },
            &mut out,
        );
        let expect = reference_conv2d(x.data(), w.data(), b, cin, h, wd, cout, kh, kw, stride, pad);
        for (o, e) in out.iter().zip(expect.iter()) {
            assert!((o - e).abs() <= 1e-12, "conv2d disagrees: {o} vs {e}");
        }
    }
}

#[test]
fn conv3d_matches_nested_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..15 {
        let cin = rng.gen_range(1..3);
        let cout = rng.gen_range(1..3);
        let kl = rng.gen_range(1..4);
        let k = rng.gen_range(1..3);
        let l = rng.gen_range(kl..kl + 3);
        let h = rng.gen_range(k..k + 3);
        let wd = rng.gen_range(k..k + 3);
        let pad = (kl / 2, k / 2, k / 2);
        let x = Array::<f64>::randn(&mut rng, &[1, cin, l, h, wd]);
        let w = Array::<f64>::randn(&mut rng, &[cout, cin, kl, k, k]);
        let lo = l + 2 * pad.0 - kl + 1;
        let ho = h + 2 * pad.1 - k + 1;
        let wo = wd + 2 * pad.2 - k + 1;
        let mut out = vec![0.0; cout * lo * ho * wo];
        conv3d_fwd(
            x.data(),
            w.data(),
            None,
            (1, cin, l, h, wd),
            (cout, kl, k, k),
            Conv3dSpec {
                stride: (1, 1, 1),
                padding: pad,
            },
            &mut out,
        );
        // Reference: six nested loops, zero padding, unit stride.
        for oc in 0..cout {
            for ol in 0..lo {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..cin {
                            for kli in 0..kl {
                                for khi in 0..k {
                                    for kwi in 0..k {
                                        let il = (ol + kli).wrapping_sub(pad.0);
                                        let ih = (oh + khi).wrapping_sub(pad.1);
                                        let iw = (ow + kwi).wrapping_sub(pad.2);
                                        if il >= l || ih >= h || iw >= wd {
                                            continue;
                                        }
                                        acc += w.data()
                                            [(((oc * cin + ic) * kl + kli) * k + khi) * k + kwi]
                                            * x.data()[((ic * l + il) * h + ih) * wd + iw];
                                    }
                                }
                            }
                        }
                        let got = out[((oc * lo + ol) * ho + oh) * wo + ow];
                        assert!(
                            (got - acc).abs() <= 1e-12,
                            "conv3d disagrees: {got} vs {acc}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn softmax_known_values() {
    let g = Graph::<f64>::new();
    let x = g.constant(&Array::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = x.softmax(1).unwrap().value();
    let expect = [0.090_030_57, 0.244_728_47, 0.665_240_96];
    for (a, e) in y.data().iter().zip(expect.iter()) {
        assert!((a - e).abs() < 1e-5, "softmax {a} vs {e}");
    }
    let sum: f64 = y.data().iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);
}

#[test]
fn group_norm_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (b, c, h, w, groups) = (2, 4, 3, 3, 2);
    let x = Array::<f64>::randn(&mut rng, &[b, c, h, w]);
    let gamma = Array::<f64>::rand_uniform(&mut rng, &[c], 0.5, 1.5);
    let beta = Array::<f64>::randn(&mut rng, &[c]);
    let g = Graph::<f64>::new();
    let y = g
        .constant(&x)
        .group_norm(&g.constant(&gamma), &g.constant(&beta), groups, 1e-5)
        .unwrap()
        .value();
    let cg = c / groups;
    for bi in 0..b {
        for gi in 0..groups {
            let mut vals = Vec::new();
            for cl in 0..cg {
                let ch = gi * cg + cl;
                for i in 0..h * w {
                    vals.push(x.data()[(bi * c + ch) * h * w + i]);
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            let istd = 1.0 / (var + 1e-5).sqrt();
            for cl in 0..cg {
                let ch = gi * cg + cl;
                for i in 0..h * w {
                    let idx = (bi * c + ch) * h * w + i;
                    let expect = (x.data()[idx] - mean) * istd * gamma.data()[ch] + beta.data()[ch];
                    assert!(
                        (y.data()[idx] - expect).abs() < 1e-10,
                        "group_norm disagrees at {idx}"
                    );
                }
            }
        }
    }
}

#[test]
fn upsample_nearest_repeats_pixels() {
    let g = Graph::<f64>::new();
    let x = g.constant(&Array::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = x.upsample_nearest2d(2).unwrap().value();
    assert_eq!(y.shape(), &[1, 1, 4, 4]);
    assert_eq!(
        y.data(),
        &[
            1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0
        ]
    );
}

#[test]
fn parallel_and_sequential_paths_agree_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = Array::<f32>::randn(&mut rng, &[3, 8, 9, 9]);
    let w = Array::<f32>::randn(&mut rng, &[8, 8, 3, 3]);
    let a = Array::<f32>::randn(&mut rng, &[6, 17, 23]);
    let b = Array::<f32>::randn(&mut rng, &[6, 23, 11]);
    let spec = Conv2dSpec {
        stride: (1, 1),
        padding: (1, 1),
        groups: 1,
    };

    let mut conv_par = vec![0f32; 3 * 8 * 9 * 9];
    let mut mm_par = vec![0f32; 6 * 17 * 11];
    set_parallel(true);
    conv2d_fwd(x.data(), w.data(), None, (3, 8, 9, 9), (8, 3, 3), spec, &mut conv_par);
    matmul_fwd(a.data(), b.data(), 6, 17, 23, 11, true, &mut mm_par);

    let mut conv_seq = vec![0f32; conv_par.len()];
    let mut mm_seq = vec![0f32; mm_par.len()];
    set_parallel(false);
    conv2d_fwd(x.data(), w.data(), None, (3, 8, 9, 9), (8, 3, 3), spec, &mut conv_seq);
    matmul_fwd(a.data(), b.data(), 6, 17, 23, 11, true, &mut mm_seq);
    set_parallel(true);

    for (p, s) in conv_par.iter().zip(conv_seq.iter()) {
        assert_eq!(p.to_bits(), s.to_bits(), "conv2d paths differ");
    }
    for (p, s) in mm_par.iter().zip(mm_seq.iter()) {
        assert_eq!(p.to_bits(), s.to_bits(), "matmul paths differ");
    }
}
