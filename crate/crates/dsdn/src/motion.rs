//! Motion extraction and re-injection on latent videos.
//!
//! Both operators work frame-major on `[B, L, C, H, W]` tensors and share a
//! structure: squeeze channels with a 1x1 conv (factor `r_c`), do temporal
//! arithmetic with per-channel 3x3 convs in the reduced space, then expand
//! channels back with another 1x1 conv.
//!
//! The decomposer turns a latent video into per-step motion features,
//! `m^l = diff(z^{l+1}) - z^l`, replicating the final entry so the output
//! keeps L slots. The combiner folds motion back into content,
//! `out^l = left(m^{l-1}) + z^l + right(m^l)` with the missing `m^0` term
//! treated as zero. The per-channel convs start as Dirac kernels, so a
//! fresh decomposer computes exact frame differences in the reduced space.

use crate::error::{config_err, Result};
use crate::params::{he_init, Fwd, ParamStore};
use dsdn_core::graph::Tensor;
use dsdn_core::{Array, Graph, Scalar};
use rand_chacha::ChaCha8Rng;

/// Dirac (identity) kernel for a depthwise 3x3 conv over `c` channels.
pub fn dirac_kernel<T: Scalar>(c: usize) -> Array<T> {
    Array::from_fn(&[c, 1, 3, 3], |i| {
        if i % 9 == 4 {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Registers decomposer (`{prefix}.dec.*`) and combiner (`{prefix}.comb.*`)
/// weights. The two keep separate reduce/restore pairs; within the
/// combiner one reduce serves both of its inputs.
pub fn init_motion_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    channels: usize,
    r_c: usize,
) -> Result<()> {
    if r_c == 0 || channels % r_c != 0 {
        return config_err(format!(
            "channel count {channels} not divisible by reduction factor {r_c}"
        ));
    }
    let cr = channels / r_c;
    for side in ["dec", "comb"] {
        store.insert(
            format!("{prefix}.{side}.reduce.w"),
            he_init(rng, &[cr, channels, 1, 1], channels),
            true,
        );
        store.insert(format!("{prefix}.{side}.reduce.b"), Array::zeros(&[cr]), true);
        store.insert(
            format!("{prefix}.{side}.restore.w"),
            he_init(rng, &[channels, cr, 1, 1], cr),
            true,
        );
        store.insert(
            format!("{prefix}.{side}.restore.b"),
            Array::zeros(&[channels]),
            true,
        );
    }
    store.insert(format!("{prefix}.dec.diff.w"), dirac_kernel(cr), true);
    store.insert(format!("{prefix}.comb.left.w"), dirac_kernel(cr), true);
    store.insert(format!("{prefix}.comb.right.w"), dirac_kernel(cr), true);
    Ok(())
}

fn dims5(t: &Tensor<impl Scalar>, what: &str) -> Result<[usize; 5]> {
    match t.shape()[..] {
        [b, l, c, h, w] => Ok([b, l, c, h, w]),
        ref s => config_err(format!("{what} expects [B, L, C, H, W], got {s:?}")),
    }
}

/// 1x1 conv applied to every frame of `[B, L, C, H, W]`.
fn frame_conv1x1<T: Scalar>(
    fwd: &Fwd<T>,
    name: &str,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, l, c, h, w] = dims5(x, name)?;
    let weight = fwd.p(&format!("{name}.w"))?;
    let bias = fwd.p(&format!("{name}.b"))?;
    let out_c = weight.shape()[0];
    let flat = x.reshape(&[b * l, c, h, w])?;
    let y = flat.conv2d(&weight, Some(&bias), (1, 1), (0, 0), 1)?;
    Ok(y.reshape(&[b, l, out_c, h, w])?)
}

/// Depthwise 3x3 conv (zero padded, no bias) applied to every frame.
fn frame_conv_dw<T: Scalar>(fwd: &Fwd<T>, name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, l, c, h, w] = dims5(x, name)?;
    let weight = fwd.p(&format!("{name}.w"))?;
    let flat = x.reshape(&[b * l, c, h, w])?;
    let y = flat.conv2d(&weight, None, (1, 1), (1, 1), c)?;
    Ok(y.reshape(&[b, l, c, h, w])?)
}

/// Extracts motion features from a latent video. Output has the same
/// shape as the input; the last slot replicates the final difference.
pub fn decompose<T: Scalar>(fwd: &Fwd<T>, prefix: &str, z: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, l, _, _, _] = dims5(z, "decompose")?;
    if l < 2 {
        return config_err(format!("motion extraction needs at least 2 frames, got {l}"));
    }
    let zr = frame_conv1x1(fwd, &format!("{prefix}.dec.reduce"), z)?;
    let shifted = frame_conv_dw(fwd, &format!("{prefix}.dec.diff"), &zr)?;
    let diffs = shifted
        .slice_axis(1, 1, l - 1)?
        .sub(&zr.slice_axis(1, 0, l - 1)?)?;
    let last = diffs.slice_axis(1, l - 2, 1)?;
    let padded = Graph::concat(&[&diffs, &last], 1)?;
    frame_conv1x1(fwd, &format!("{prefix}.dec.restore"), &padded)
}

/// Fuses motion features back into a latent video of the same shape.
pub fn combine<T: Scalar>(
    fwd: &Fwd<T>,
    prefix: &str,
    z: &Tensor<T>,
    motion: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, l, _, h, w] = dims5(z, "combine")?;
    if z.shape() != motion.shape() {
        return config_err(format!(
            "content {:?} and motion {:?} shapes differ",
            z.shape(),
            motion.shape()
        ));
    }
    let zr = frame_conv1x1(fwd, &format!("{prefix}.comb.reduce"), z)?;
    let mr = frame_conv1x1(fwd, &format!("{prefix}.comb.reduce"), motion)?;
    let cr = zr.shape()[2];
    let right = frame_conv_dw(fwd, &format!("{prefix}.comb.right"), &mr)?;
    let left = frame_conv_dw(fwd, &format!("{prefix}.comb.left"), &mr)?;
    let zero_head = fwd.graph.constant(&Array::<T>::zeros(&[b, 1, cr, h, w]));
    let left_shifted = Graph::concat(&[&zero_head, &left.slice_axis(1, 0, l - 1)?], 1)?;
    let fused = zr.add(&right)?.add(&left_shifted)?;
    frame_conv1x1(fwd, &format!("{prefix}.comb.restore"), &fused)
}
