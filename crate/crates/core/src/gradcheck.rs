//! Finite-difference validation of the reverse pass.
//!
//! Everything here runs in f64: central differences with step 1e-5 sit
//! around 1e-10 relative truncation error, far below the 1e-4 acceptance
//! threshold, so a failure means a wrong gradient rather than round-off.
//! The numeric side only ever calls the forward pass, so it cannot share a
//! bug with the backward code it is checking.

use crate::array::Array;
use crate::error::Result;
use crate::graph::{Graph, Tensor};
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Relative error with an absolute floor, so near-zero gradient pairs are
/// compared on an absolute scale instead of blowing up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Clone, Copy)]
pub enum Coords {
    /// Check every coordinate of every input.
    All,
    /// Check a deterministic random subset of this many coordinates per
    /// input (always including at least one).
    Sample(usize),
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub configs: usize,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences. Returns (max relative error, coordinates checked).
///
/// `build` must be a pure function of the input values: it is re-run for
/// every probe.
pub fn finite_diff<F>(
    inputs: &[Array<f64>],
    build: F,
    eps: f64,
    coords: Coords,
    seed: u64,
) -> Result<(f64, usize)>
where
    F: Fn(&Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let eval = |xs: &[Array<f64>]| -> Result<f64> {
        let g = Graph::new();
        let ts: Vec<Tensor<f64>> = xs.iter().map(|x| g.leaf(x, false)).collect();
        let loss = build(&g, &ts)?;
        Ok(loss.item()?.into_f64())
    };

    let analytic: Vec<Option<Array<f64>>> = {
        let g = Graph::new();
        let ts: Vec<Tensor<f64>> = inputs.iter().map(|x| g.leaf(x, true)).collect();
        let loss = build(&g, &ts)?;
        g.backward(&loss)?;
        ts.iter().map(|t| t.grad()).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        if n == 0 {
            continue;
        }
        let picks: Vec<usize> = match coords {
            Coords::All => (0..n).collect(),
            Coords::Sample(k) => {
                let k = k.clamp(1, n);
                let mut seen = std::collections::BTreeSet::new();
                while seen.len() < k {
                    seen.insert(rng.gen_range(0..n));
                }
                seen.into_iter().collect()
            }
        };
        for &c in &picks {
            let orig = input.data()[c];
            probe[i].data_mut()[c] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[c] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].as_ref().map_or(0.0, |g| g.data()[c]);
            max_err = max_err.max(rel_err(a, numeric));
            checked += 1;
        }
    }
    Ok((max_err, checked))
}

/// Scalar objective for checking a tensor-valued op: a fixed random
/// weighting of the output, so every output coordinate influences the
/// loss with a distinct coefficient.
fn weighted_loss(
    out: &Tensor<f64>,
    g: &Graph<f64>,
    weight_seed: u64,
) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
    let w = Array::<f64>::rand_uniform(&mut rng, &out.shape(), 0.25, 1.75);
    out.mul(&g.constant(&w))?.sum_all().reshape(&[1])
}

struct Case {
    name: &'static str,
    run: Box<dyn Fn(u64) -> Result<(f64, usize)>>,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    Array::randn(rng, shape)
}

/// Finite-difference suite covering every differentiable operation, each
/// under `configs` random shape/data configurations.
pub fn kernel_suite(configs: usize, base_seed: u64) -> Result<Vec<CheckReport>> {
    let cases: Vec<Case> = vec![
        Case {
            name: "add_broadcast",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b = rng.gen_range(1..4usize);
                let r = rng.gen_range(2..5usize);
                let c = rng.gen_range(2..5usize);
                let x = randn(&mut rng, &[b, r, c]);
                let y_rows = if rng.gen_bool(0.5) { r } else { 1 };
                let y = randn(&mut rng, &[y_rows, c]);
                finite_diff(
                    &[x, y],
                    |g, t| weighted_loss(&t[0].add(&t[1])?, g, seed),
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "sub_broadcast",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
                let r = rng.gen_range(2..5usize);
                let c = rng.gen_range(2..6usize);
                let x = randn(&mut rng, &[r, c]);
                let y = randn(&mut rng, &[r, 1]);
                finite_diff(
                    &[x, y],
                    |g, t| weighted_loss(&t[0].sub(&t[1])?, g, seed),
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "mul_broadcast",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x22);
                let b = rng.gen_range(1..3usize);
                let r = rng.gen_range(2..5usize);
                let c = rng.gen_range(2..5usize);
                let x = randn(&mut rng, &[b, r, c]);
                let y = randn(&mut rng, &[b, 1, c]);
                finite_diff(
                    &[x, y],
                    |g, t| weighted_loss(&t[0].mul(&t[1])?, g, seed),
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "scale_add_scalar",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x33);
                let x = randn(&mut rng, &[3, 4]);
                let s = rng.gen_range(-2.0..2.0);
                let a = rng.gen_range(-1.0..1.0);
                finite_diff(
                    &[x],
                    move |g, t| weighted_loss(&t[0].scale(s).add_scalar(a), g, seed),
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "matmul",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x44);
                let m = rng.gen_range(1..4usize);
                let k = rng.gen_range(1..4usize);
                let n = rng.gen_range(1..4usize);
                let x = randn(&mut rng, &[m, k]);
                let y = randn(&mut rng, &[k, n]);
                finite_diff(
                    &[x, y],
                    |g, t| weighted_loss(&t[0].matmul(&t[1])?, g, seed),
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "matmul_batched",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
                let b = rng.gen_range(2..4usize);
                let h = rng.gen_range(1..3usize);
                let m = rng.gen_range(1..4usize);
                let k = rng.gen_range(1..4usize);
                let n = rng.gen_range(1..4usize);
                let x = randn(&mut rng, &[b, h, m, k]);
                let y = randn(&mut rng, &[b, h, k, n]);
                finite_diff(
                    &[x, y],
                    |g, t| weighted_loss(&t[0].matmul(&t[1])?, g, seed),
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "matmul_shared_rhs",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x66);
                let b = rng.gen_range(2..4usize);
                let m = rng.gen_range(1..4usize);
                let k = rng.gen_range(1..4usize);
                let n = rng.gen_range(1..4usize);
                let x = randn(&mut rng, &[b, m, k]);
                let y = randn(&mut rng, &[k, n]);
                finite_diff(
                    &[x, y],
                    |g, t| weighted_loss(&t[0].matmul(&t[1])?, g, seed),
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "conv2d",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
                let b = rng.gen_range(1..3usize);
                let cin = rng.gen_range(1..3usize);
                let cout = rng.gen_range(1..3usize);
                let kh = rng.gen_range(1..4usize);
                let kw = rng.gen_range(1..4usize);
                let h = rng.gen_range(kh..kh + 3);
                let w = rng.gen_range(kw..kw + 3);
                let stride = (rng.gen_range(1..3usize), rng.gen_range(1..3usize));
                let pad = (rng.gen_range(0..2usize), rng.gen_range(0..2usize));
                let x = randn(&mut rng, &[b, cin, h, w]);
                let wt = randn(&mut rng, &[cout, cin, kh, kw]);
                let bias = randn(&mut rng, &[cout]);
                finite_diff(
                    &[x, wt, bias],
                    move |g, t| {
                        weighted_loss(&t[0].conv2d(&t[1], Some(&t[2]), stride, pad, 1)?, g, seed)
                    },
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "conv2d_grouped",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x88);
                let groups = rng.gen_range(2..4usize);
                let cin = groups * rng.gen_range(1..3usize);
                let cout = groups * rng.gen_range(1..3usize);
                let k = rng.gen_range(1..4usize);
                let h = rng.gen_range(k..k + 3);
                let w = rng.gen_range(k..k + 3);
                let x = randn(&mut rng, &[1, cin, h, w]);
                let wt = randn(&mut rng, &[cout, cin / groups, k, k]);
                finite_diff(
                    &[x, wt],
                    move |g, t| {
                        weighted_loss(&t[0].conv2d(&t[1], None, (1, 1), (k / 2, k / 2), groups)?, g, seed)
                    },
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "conv3d",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x99);
                let cin = rng.gen_range(1..3usize);
                let cout = rng.gen_range(1..3usize);
                let kl = rng.gen_range(1..4usize);
                let k = rng.gen_range(1..3usize);
                let l = rng.gen_range(kl..kl + 2);
                let h = rng.gen_range(k..k + 2);
                let w = rng.gen_range(k..k + 2);
                let stride = (1, rng.gen_range(1..3usize), rng.gen_range(1..3usize));
                let pad = (kl / 2, k / 2, k / 2);
                let x = randn(&mut rng, &[1, cin, l, h, w]);
                let wt = randn(&mut rng, &[cout, cin, kl, k, k]);
                let bias = randn(&mut rng, &[cout]);
                finite_diff(
                    &[x, wt, bias],
                    move |g, t| {
                        weighted_loss(&t[0].conv3d(&t[1], Some(&t[2]), stride, pad)?, g, seed)
                    },
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "upsample_nearest",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xaa);
                let f = rng.gen_range(2..4usize);
                let x2 = randn(&mut rng, &[2, 2, 3, 2]);
                let (e2, c2) = finite_diff(
                    &[x2],
                    move |g, t| weighted_loss(&t[0].upsample_nearest2d(f)?, g, seed),
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )?;
                let x3 = randn(&mut rng, &[1, 2, 2, 2, 3]);
                let (e3, c3) = finite_diff(
                    &[x3],
                    move |g, t| weighted_loss(&t[0].upsample_nearest3d_spatial(f)?, g, seed),
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )?;
                Ok((e2.max(e3), c2 + c3))
            }),
        },
        Case {
            name: "softmax",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbb);
                let shape = [rng.gen_range(2..4usize), rng.gen_range(2..5usize), rng.gen_range(2..4usize)];
                let axis = rng.gen_range(0..3usize);
                let x = randn(&mut rng, &shape);
                finite_diff(
                    &[x],
                    move |g, t| weighted_loss(&t[0].softmax(axis)?, g, seed),
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "group_norm",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xcc);
                let groups = rng.gen_range(1..3usize);
                let c = groups * rng.gen_range(1..3usize);
                let b = rng.gen_range(1..3usize);
                let h = rng.gen_range(2..4usize);
                let w = rng.gen_range(2..4usize);
                let x = randn(&mut rng, &[b, c, h, w]);
                let gamma = Array::rand_uniform(&mut rng, &[c], 0.5, 1.5);
                let beta = randn(&mut rng, &[c]);
                finite_diff(
                    &[x, gamma, beta],
                    move |g, t| weighted_loss(&t[0].group_norm(&t[1], &t[2], groups, 1e-5)?, g, seed),
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "silu",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdd);
                let x = randn(&mut rng, &[3, 5]);
                finite_diff(
                    &[x],
                    |g, t| weighted_loss(&t[0].silu(), g, seed),
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "l2_normalize_rows",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xee);
                let rows = rng.gen_range(2..5usize);
                let d = rng.gen_range(2..6usize);
                let x = randn(&mut rng, &[rows, d]);
                finite_diff(
                    &[x],
                    |g, t| weighted_loss(&t[0].l2_normalize_rows(1e-8)?, g, seed),
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "layout_chain",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xff);
                let x = randn(&mut rng, &[2, 3, 4]);
                let y = randn(&mut rng, &[2, 2, 4]);
                finite_diff(
                    &[x, y],
                    |g, t| {
                        let a = t[0].permute(&[1, 0, 2])?.reshape(&[3, 8])?;
                        let b = t[1].slice_axis(1, 0, 2)?.reshape(&[2, 8])?;
                        let joined = Graph::concat(&[&a, &b], 0)?;
                        weighted_loss(&joined, g, seed)
                    },
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "reductions",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234);
                let x = randn(&mut rng, &[2, 3, 4]);
                finite_diff(
                    &[x],
                    |g, t| {
                        let a = t[0].mean_tail(2)?.sum_all();
                        let b = t[0].mean_all();
                        let c = t[0].sum_all().scale(0.01);
                        let _ = g;
                        a.add(&b)?.add(&c)?.reshape(&[1])
                    },
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "gather_rows",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2345);
                let v = rng.gen_range(3..6usize);
                let d = rng.gen_range(2..5usize);
                let table = randn(&mut rng, &[v, d]);
                let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..v)).collect();
                finite_diff(
                    &[table],
                    move |g, t| weighted_loss(&t[0].gather_rows(&ids)?, g, seed),
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
        Case {
            name: "cross_entropy_mean",
            run: Box::new(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3456);
                let n = rng.gen_range(2..5usize);
                let k = rng.gen_range(2..5usize);
                let logits = randn(&mut rng, &[n, k]);
                let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
                finite_diff(
                    &[logits],
                    move |g, t| {
                        let _ = g;
                        t[0].cross_entropy_mean(&targets)
                    },
                    DEFAULT_EPS,
                    Coords::All,
                    seed,
                )
            }),
        },
    ];

    let mut reports = Vec::with_capacity(cases.len());
    for (ci, case) in cases.iter().enumerate() {
        let mut max_err = 0.0f64;
        let mut checked = 0usize;
        for cfg in 0..configs {
            let seed = base_seed
                .wrapping_add(ci as u64 * 1_000_003)
                .wrapping_add(cfg as u64 * 7919);
            let (e, c) = (case.run)(seed)?;
            max_err = max_err.max(e);
            checked += c;
        }
        reports.push(CheckReport {
            name: case.name.to_string(),
            max_rel_err: max_err,
            coords_checked: checked,
            configs,
        });
    }
    Ok(reports)
}
