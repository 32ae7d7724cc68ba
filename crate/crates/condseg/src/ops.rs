//! Differentiable tensor operations.
//!
//! Each op validates shapes, computes its output eagerly, and records a
//! node on the tape. Backward rules live in [`backward_step`], keyed by
//! the recorded op. Convolution and the linear layer run on an im2col +
//! GEMM path; everything else is straightforward loops.
//!
//! Convolution is cross-correlation (no kernel flip), the usual deep
//! learning convention. `relu` uses `relu'(0) = 0`; `sigmoid` is computed
//! through a sign-stable branch.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{accumulate, NodeId, Op, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

/// Unfold one image `[cin, h, w]` into `[cin*k*k, hp*wp]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    input: &[S],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hp: usize,
    wp: usize,
    cols: &mut [S],
) {
    debug_assert_eq!(cols.len(), cin * k * k * hp * wp);
    if stride == 1 {
        for ci in 0..cin {
            let plane = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * hp * wp..][..hp * wp];
                    for oy in 0..hp {
                        let dest = &mut row[oy * wp..(oy + 1) * wp];
                        let iy = oy + ky;
                        if iy < pad || iy >= h + pad {
                            dest.fill(S::zero());
                            continue;
                        }
                        let iy = iy - pad;
                        // Valid output x range: 0 <= ox + kx - pad < w.
                        let ox_start = pad.saturating_sub(kx);
                        let ox_end = (w + pad - kx).min(wp);
                        dest[..ox_start].fill(S::zero());
                        dest[ox_end..].fill(S::zero());
                        let ix0 = ox_start + kx - pad;
                        dest[ox_start..ox_end]
                            .copy_from_slice(&plane[iy * w + ix0..iy * w + ix0 + (ox_end - ox_start)]);
                    }
                }
            }
        }
    } else {
        // Strided gather; rarely used, kept simple.
        for ci in 0..cin {
            let plane = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * hp * wp..][..hp * wp];
                    for oy in 0..hp {
                        for ox in 0..wp {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            row[oy * wp + ox] = if iy >= pad && iy < h + pad && ix >= pad && ix < w + pad
                            {
                                plane[(iy - pad) * w + (ix - pad)]
                            } else {
                                S::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`] into one image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_add<S: Scalar>(
    cols: &[S],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hp: usize,
    wp: usize,
    out: &mut [S],
) {
    debug_assert_eq!(out.len(), cin * h * w);
    if stride == 1 {
        for ci in 0..cin {
            let plane = &mut out[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * hp * wp..][..hp * wp];
                    let ox_start = pad.saturating_sub(kx);
                    let ox_end = (w + pad - kx).min(wp);
                    for oy in 0..hp {
                        let iy = oy + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let ix0 = iy * w + ox_start + kx - pad;
                        let dst = &mut plane[ix0..ix0 + (ox_end - ox_start)];
                        let src = &row[oy * wp + ox_start..oy * wp + ox_end];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                }
            }
        }
        return;
    }
    for ci in 0..cin {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hp * wp..][..hp * wp];
                for oy in 0..hp {
                    let iy = oy * stride + ky;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    for ox in 0..wp {
                        let ix = ox * stride + kx;
                        if ix >= pad && ix < w + pad {
                            let idx = iy * w + (ix - pad);
                            plane[idx] = plane[idx] + row[oy * wp + ox];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
    hp: usize,
    wp: usize,
}

fn conv_geometry<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    padding: Padding,
    stride: usize,
) -> Result<ConvGeometry> {
    input.expect_rank("conv2d", 4)?;
    weight.expect_rank("conv2d", 4)?;
    bias.expect_rank("conv2d", 1)?;
    let (batch, cin, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (cout, wcin, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if kh != kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square, got {kh}x{kw}"),
        ));
    }
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {cin} != weight input channels {wcin}"),
        ));
    }
    if bias.shape()[0] != cout {
        return Err(Error::shape(
            "conv2d",
            format!("bias length {} != output channels {cout}", bias.shape()[0]),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1"));
    }
    let pad = match padding {
        Padding::Same => {
            if kh % 2 == 0 {
                return Err(Error::invalid(
                    "conv2d",
                    format!("same padding requires odd kernel, got {kh}"),
                ));
            }
            (kh - 1) / 2
        }
        Padding::Valid => 0,
    };
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!("spatial size {h}x{w} smaller than kernel {kh}"),
        ));
    }
    if (h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("spatial size {h}x{w} not compatible with stride {stride}"),
        ));
    }
    Ok(ConvGeometry {
        batch,
        cin,
        h,
        w,
        cout,
        k: kh,
        pad,
        hp: (h + 2 * pad - kh) / stride + 1,
        wp: (w + 2 * pad - kw) / stride + 1,
    })
}

/// 2D cross-correlation over `[B, Cin, H, W]` with kernel
/// `[Cout, Cin, k, k]` and per-output-channel bias.
pub fn conv2d<S: Scalar>(
    tape: &mut Tape<S>,
    input: NodeId,
    weight: NodeId,
    bias: NodeId,
    padding: Padding,
    stride: usize,
) -> Result<NodeId> {
    let g = conv_geometry(
        tape.value(input),
        tape.value(weight),
        tape.value(bias),
        padding,
        stride,
    )?;
    let ckk = g.cin * g.k * g.k;
    let out_plane = g.hp * g.wp;
    let mut out = vec![S::zero(); g.batch * g.cout * out_plane];
    let mut cols = vec![S::zero(); ckk * out_plane];
    let x = tape.value(input).data();
    let wgt = tape.value(weight).data();
    let b = tape.value(bias).data();
    for bi in 0..g.batch {
        im2col(
            &x[bi * g.cin * g.h * g.w..],
            g.cin,
            g.h,
            g.w,
            g.k,
            stride,
            g.pad,
            g.hp,
            g.wp,
            &mut cols,
        );
        let out_b = &mut out[bi * g.cout * out_plane..(bi + 1) * g.cout * out_plane];
        S::gemm(g.cout, ckk, out_plane, wgt, false, &cols, false, out_b, false);
        for oc in 0..g.cout {
            let bias_v = b[oc];
            for v in &mut out_b[oc * out_plane..(oc + 1) * out_plane] {
                *v = *v + bias_v;
            }
        }
    }
    let requires =
        tape.requires_grad(input) || tape.requires_grad(weight) || tape.requires_grad(bias);
    Ok(tape.op_output(
        "conv2d",
        Tensor::from_vec(vec![g.batch, g.cout, g.hp, g.wp], out),
        requires,
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad: g.pad,
        },
    ))
}

// ---------------------------------------------------------------------------
// pointwise and structural ops
// ---------------------------------------------------------------------------

pub fn relu<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> NodeId {
    let out = tape.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
    let requires = tape.requires_grad(x);
    tape.op_output("relu", out, requires, Op::Relu { input: x })
}

#[inline]
pub(crate) fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

pub fn sigmoid<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> NodeId {
    let out = tape.value(x).map(sigmoid_scalar);
    let requires = tape.requires_grad(x);
    tape.op_output("sigmoid", out, requires, Op::Sigmoid { input: x })
}

/// Affine map `y = x W^T + b` with `x: [B, N]`, `weight: [M, N]`,
/// `bias: [M]`.
pub fn linear<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    weight: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    tape.value(x).expect_rank("linear", 2)?;
    tape.value(weight).expect_rank("linear", 2)?;
    tape.value(bias).expect_rank("linear", 1)?;
    let (bsz, nin) = (tape.value(x).shape()[0], tape.value(x).shape()[1]);
    let (nout, win) = (tape.value(weight).shape()[0], tape.value(weight).shape()[1]);
    if win != nin {
        return Err(Error::shape(
            "linear",
            format!("input width {nin} != weight input width {win}"),
        ));
    }
    if tape.value(bias).shape()[0] != nout {
        return Err(Error::shape(
            "linear",
            format!(
                "bias length {} != output width {nout}",
                tape.value(bias).shape()[0]
            ),
        ));
    }
    let mut out = vec![S::zero(); bsz * nout];
    S::gemm(
        bsz,
        nin,
        nout,
        tape.value(x).data(),
        false,
        tape.value(weight).data(),
        true,
        &mut out,
        false,
    );
    let b = tape.value(bias).data();
    for row in out.chunks_exact_mut(nout) {
        for (v, bv) in row.iter_mut().zip(b) {
            *v = *v + *bv;
        }
    }
    let requires =
        tape.requires_grad(x) || tape.requires_grad(weight) || tape.requires_grad(bias);
    Ok(tape.op_output(
        "linear",
        Tensor::from_vec(vec![bsz, nout], out),
        requires,
        Op::Linear {
            input: x,
            weight,
            bias,
        },
    ))
}

/// Per-channel spatial mean: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> Result<NodeId> {
    tape.value(x).expect_rank("global_avg_pool", 4)?;
    let s = tape.value(x).shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h == 0 || w == 0 {
        return Err(Error::shape("global_avg_pool", "empty spatial extent"));
    }
    let plane = h * w;
    let norm = S::from_f64(1.0 / plane as f64);
    let data = tape.value(x).data();
    let mut out = vec![S::zero(); b * c];
    for (i, slot) in out.iter_mut().enumerate() {
        let sum: S = data[i * plane..(i + 1) * plane].iter().copied().sum();
        *slot = sum * norm;
    }
    let requires = tape.requires_grad(x);
    Ok(tape.op_output(
        "global_avg_pool",
        Tensor::from_vec(vec![b, c], out),
        requires,
        Op::GlobalAvgPool { input: x },
    ))
}

/// 2x2 stride-2 max pooling. Spatial extents must be even. Ties resolve
/// to the first maximum in row-major scan order.
pub fn maxpool2<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> Result<NodeId> {
    tape.value(x).expect_rank("maxpool2", 4)?;
    let s = tape.value(x).shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("spatial extents must be even, got {h}x{w}"),
        ));
    }
    let (hp, wp) = (h / 2, w / 2);
    let data = tape.value(x).data();
    let mut out = vec![S::zero(); b * c * hp * wp];
    let mut argmax = vec![0u32; out.len()];
    for plane_idx in 0..b * c {
        let plane = &data[plane_idx * h * w..];
        for oy in 0..hp {
            for ox in 0..wp {
                let mut best = S::neg_infinity();
                let mut best_at = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (oy * 2 + dy) * w + (ox * 2 + dx);
                        if plane[idx] > best {
                            best = plane[idx];
                            best_at = idx;
                        }
                    }
                }
                let o = (plane_idx * hp + oy) * wp + ox;
                out[o] = best;
                argmax[o] = (plane_idx * h * w + best_at) as u32;
            }
        }
    }
    let requires = tape.requires_grad(x);
    Ok(tape.op_output(
        "maxpool2",
        Tensor::from_vec(vec![b, c, hp, wp], out),
        requires,
        Op::MaxPool2 { input: x, argmax },
    ))
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> Result<NodeId> {
    tape.value(x).expect_rank("upsample_nearest2", 4)?;
    let s = tape.value(x).shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let data = tape.value(x).data();
    let mut out = vec![S::zero(); b * c * 4 * h * w];
    let (h2, w2) = (h * 2, w * 2);
    for plane_idx in 0..b * c {
        let src = &data[plane_idx * h * w..(plane_idx + 1) * h * w];
        let dst = &mut out[plane_idx * h2 * w2..(plane_idx + 1) * h2 * w2];
        for y in 0..h2 {
            for x2 in 0..w2 {
                dst[y * w2 + x2] = src[(y / 2) * w + (x2 / 2)];
            }
        }
    }
    let requires = tape.requires_grad(x);
    Ok(tape.op_output(
        "upsample_nearest2",
        Tensor::from_vec(vec![b, c, h2, w2], out),
        requires,
        Op::Upsample2 { input: x },
    ))
}

/// `[B, Ca, H, W] ++ [B, Cb, H, W] -> [B, Ca+Cb, H, W]`, first operand
/// first (fixed contract).
pub fn concat_channels<S: Scalar>(tape: &mut Tape<S>, a: NodeId, b: NodeId) -> Result<NodeId> {
    tape.value(a).expect_rank("concat_channels", 4)?;
    tape.value(b).expect_rank("concat_channels", 4)?;
    let sa = tape.value(a).shape().to_vec();
    let sb = tape.value(b).shape().to_vec();
    if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
        return Err(Error::shape(
            "concat_channels",
            format!("non-channel dims differ: {sa:?} vs {sb:?}"),
        ));
    }
    let plane = sa[2] * sa[3];
    let (ca, cb) = (sa[1], sb[1]);
    let da = tape.value(a).data();
    let db = tape.value(b).data();
    let mut out = Vec::with_capacity(da.len() + db.len());
    for bi in 0..sa[0] {
        out.extend_from_slice(&da[bi * ca * plane..(bi + 1) * ca * plane]);
        out.extend_from_slice(&db[bi * cb * plane..(bi + 1) * cb * plane]);
    }
    let requires = tape.requires_grad(a) || tape.requires_grad(b);
    Ok(tape.op_output(
        "concat_channels",
        Tensor::from_vec(vec![sa[0], ca + cb, sa[2], sa[3]], out),
        requires,
        Op::ConcatChannels { a, b },
    ))
}

/// `[B, Na] ++ [B, Nb] -> [B, Na+Nb]`. `Nb = 0` is allowed and returns
/// the first operand's contents.
pub fn concat_vec<S: Scalar>(tape: &mut Tape<S>, a: NodeId, b: NodeId) -> Result<NodeId> {
    tape.value(a).expect_rank("concat_vec", 2)?;
    tape.value(b).expect_rank("concat_vec", 2)?;
    let sa = tape.value(a).shape().to_vec();
    let sb = tape.value(b).shape().to_vec();
    if sa[0] != sb[0] {
        return Err(Error::shape(
            "concat_vec",
            format!("batch dims differ: {} vs {}", sa[0], sb[0]),
        ));
    }
    let (na, nb) = (sa[1], sb[1]);
    let da = tape.value(a).data();
    let db = tape.value(b).data();
    let mut out = Vec::with_capacity(da.len() + db.len());
    for bi in 0..sa[0] {
        out.extend_from_slice(&da[bi * na..(bi + 1) * na]);
        out.extend_from_slice(&db[bi * nb..(bi + 1) * nb]);
    }
    let requires = tape.requires_grad(a) || tape.requires_grad(b);
    Ok(tape.op_output(
        "concat_vec",
        Tensor::from_vec(vec![sa[0], na + nb], out),
        requires,
        Op::ConcatVec { a, b },
    ))
}

/// `out[b,c,h,w] = x[b,c,h,w] * gate[b,c]` — channel-wise recalibration.
pub fn channel_scale<S: Scalar>(tape: &mut Tape<S>, x: NodeId, gate: NodeId) -> Result<NodeId> {
    tape.value(x).expect_rank("channel_scale", 4)?;
    tape.value(gate).expect_rank("channel_scale", 2)?;
    let s = tape.value(x).shape().to_vec();
    let gs = tape.value(gate).shape().to_vec();
    if gs[0] != s[0] || gs[1] != s[1] {
        return Err(Error::shape(
            "channel_scale",
            format!("gate shape {gs:?} does not match input {s:?}"),
        ));
    }
    let plane = s[2] * s[3];
    let data = tape.value(x).data();
    let g = tape.value(gate).data();
    let mut out = vec![S::zero(); data.len()];
    for (i, gv) in g.iter().enumerate() {
        for (o, v) in out[i * plane..(i + 1) * plane]
            .iter_mut()
            .zip(&data[i * plane..(i + 1) * plane])
        {
            *o = *v * *gv;
        }
    }
    let requires = tape.requires_grad(x) || tape.requires_grad(gate);
    Ok(tape.op_output(
        "channel_scale",
        Tensor::from_vec(s, out),
        requires,
        Op::ChannelScale { x, gate },
    ))
}

/// `out[b,c,h,w] = x[b,c,h,w] + bias[b,c]` — the additive half of FiLM.
pub fn channel_bias<S: Scalar>(tape: &mut Tape<S>, x: NodeId, bias: NodeId) -> Result<NodeId> {
    tape.value(x).expect_rank("channel_bias", 4)?;
    tape.value(bias).expect_rank("channel_bias", 2)?;
    let s = tape.value(x).shape().to_vec();
    let bs = tape.value(bias).shape().to_vec();
    if bs[0] != s[0] || bs[1] != s[1] {
        return Err(Error::shape(
            "channel_bias",
            format!("bias shape {bs:?} does not match input {s:?}"),
        ));
    }
    let plane = s[2] * s[3];
    let data = tape.value(x).data();
    let b = tape.value(bias).data();
    let mut out = vec![S::zero(); data.len()];
    for (i, bv) in b.iter().enumerate() {
        for (o, v) in out[i * plane..(i + 1) * plane]
            .iter_mut()
            .zip(&data[i * plane..(i + 1) * plane])
        {
            *o = *v + *bv;
        }
    }
    let requires = tape.requires_grad(x) || tape.requires_grad(bias);
    Ok(tape.op_output(
        "channel_bias",
        Tensor::from_vec(s, out),
        requires,
        Op::ChannelBias { x, bias },
    ))
}

/// Column slice of a `[B, N]` tensor: columns `start..end`.
pub fn slice_cols<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    start: usize,
    end: usize,
) -> Result<NodeId> {
    tape.value(x).expect_rank("slice_cols", 2)?;
    let s = tape.value(x).shape().to_vec();
    if start > end || end > s[1] {
        return Err(Error::invalid(
            "slice_cols",
            format!("range {start}..{end} out of width {}", s[1]),
        ));
    }
    let n = s[1];
    let width = end - start;
    let data = tape.value(x).data();
    let mut out = Vec::with_capacity(s[0] * width);
    for bi in 0..s[0] {
        out.extend_from_slice(&data[bi * n + start..bi * n + end]);
    }
    let requires = tape.requires_grad(x);
    Ok(tape.op_output(
        "slice_cols",
        Tensor::from_vec(vec![s[0], width], out),
        requires,
        Op::SliceCols { input: x, start },
    ))
}

/// Flatten to `[numel / cols, cols]` (e.g. pooled feature maps into a
/// linear layer). Pure view; backward reshapes the gradient back.
pub fn reshape_rows<S: Scalar>(tape: &mut Tape<S>, x: NodeId, cols: usize) -> Result<NodeId> {
    let numel = tape.value(x).numel();
    if cols == 0 || numel % cols != 0 {
        return Err(Error::shape(
            "reshape_rows",
            format!("{numel} elements do not divide into rows of {cols}"),
        ));
    }
    let out = tape
        .value(x)
        .clone()
        .reshaped(vec![numel / cols, cols]);
    let requires = tape.requires_grad(x);
    Ok(tape.op_output("reshape_rows", out, requires, Op::Reshape { input: x }))
}

fn elementwise_pair<S: Scalar>(
    tape: &Tape<S>,
    op: &'static str,
    a: NodeId,
    b: NodeId,
) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::shape(
            op,
            format!(
                "{:?} vs {:?}",
                tape.value(a).shape(),
                tape.value(b).shape()
            ),
        ));
    }
    Ok(())
}

pub fn add<S: Scalar>(tape: &mut Tape<S>, a: NodeId, b: NodeId) -> Result<NodeId> {
    elementwise_pair(tape, "add", a, b)?;
    let out: Vec<S> = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(&x, &y)| x + y)
        .collect();
    let shape = tape.value(a).shape().to_vec();
    let requires = tape.requires_grad(a) || tape.requires_grad(b);
    Ok(tape.op_output(
        "add",
        Tensor::from_vec(shape, out),
        requires,
        Op::Add { a, b },
    ))
}

pub fn mul<S: Scalar>(tape: &mut Tape<S>, a: NodeId, b: NodeId) -> Result<NodeId> {
    elementwise_pair(tape, "mul", a, b)?;
    let out: Vec<S> = tape
        .value(a)
        .data()
        .iter()
        .zip(tape.value(b).data())
        .map(|(&x, &y)| x * y)
        .collect();
    let shape = tape.value(a).shape().to_vec();
    let requires = tape.requires_grad(a) || tape.requires_grad(b);
    Ok(tape.op_output(
        "mul",
        Tensor::from_vec(shape, out),
        requires,
        Op::Mul { a, b },
    ))
}

pub fn scale<S: Scalar>(tape: &mut Tape<S>, x: NodeId, factor: S) -> NodeId {
    let out = tape.value(x).map(|v| v * factor);
    let requires = tape.requires_grad(x);
    tape.op_output("scale", out, requires, Op::Scale { input: x, factor })
}

/// Full reduction to a rank-0 scalar.
pub fn sum<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> NodeId {
    let total: S = tape.value(x).data().iter().copied().sum();
    let requires = tape.requires_grad(x);
    tape.op_output(
        "sum",
        Tensor::scalar(total),
        requires,
        Op::Sum { input: x },
    )
}

/// Mean binary cross-entropy on logits, in the numerically stable
/// `max(z,0) - z*y + ln(1+e^{-|z|})` form.
///
/// `channel_weights`, when given, must match the channel extent of a
/// rank-4 prediction; each element's term is multiplied by its channel
/// weight and the sum is still divided by the total element count.
pub fn bce_with_logits<S: Scalar>(
    tape: &mut Tape<S>,
    pred: NodeId,
    target: NodeId,
    channel_weights: Option<&[S]>,
) -> Result<NodeId> {
    if tape.value(pred).shape() != tape.value(target).shape() {
        return Err(Error::shape(
            "bce_with_logits",
            format!(
                "prediction {:?} vs target {:?}",
                tape.value(pred).shape(),
                tape.value(target).shape()
            ),
        ));
    }
    if !tape.value(target).is_binary() {
        return Err(Error::invalid(
            "bce_with_logits",
            "target contains values outside {0, 1}",
        ));
    }
    let weights = match channel_weights {
        Some(w) => {
            let shape = tape.value(pred).shape();
            if shape.len() != 4 || w.len() != shape[1] {
                return Err(Error::invalid(
                    "bce_with_logits",
                    format!(
                        "channel weights length {} incompatible with shape {shape:?}",
                        w.len()
                    ),
                ));
            }
            Some(w.to_vec())
        }
        None => None,
    };
    let z = tape.value(pred).data();
    let y = tape.value(target).data();
    let n = z.len();
    let norm = S::from_f64(1.0 / n as f64);
    let mut total = S::zero();
    let plane: usize = if tape.value(pred).rank() == 4 {
        tape.value(pred).shape()[2] * tape.value(pred).shape()[3]
    } else {
        1
    };
    let channels = if tape.value(pred).rank() == 4 {
        tape.value(pred).shape()[1]
    } else {
        1
    };
    for i in 0..n {
        let zi = z[i];
        let yi = y[i];
        let term = zi.max(S::zero()) - zi * yi + (-zi.abs()).exp().ln_1p();
        let w = match &weights {
            Some(w) => w[(i / plane) % channels],
            None => S::one(),
        };
        total = total + w * term;
    }
    let requires = tape.requires_grad(pred);
    Ok(tape.op_output(
        "bce_with_logits",
        Tensor::scalar(total * norm),
        requires,
        Op::BceWithLogits {
            pred,
            target,
            channel_weights: weights,
        },
    ))
}

// ---------------------------------------------------------------------------
// backward rules
// ---------------------------------------------------------------------------

pub(crate) fn backward_step<S: Scalar>(
    nodes: &[crate::tape::Node<S>],
    idx: usize,
    grad: &Tensor<S>,
    grads: &mut [Option<Tensor<S>>],
) {
    let needs = |id: NodeId| nodes[id.0].requires_grad;
    let value = |id: NodeId| &nodes[id.0].value;
    match &nodes[idx].op {
        Op::Leaf | Op::Param(_) => unreachable!("terminal nodes handled by the tape"),
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
        } => {
            let x = value(*input);
            let wgt = value(*weight);
            let (batch, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (cout, k) = (wgt.shape()[0], wgt.shape()[2]);
            let (hp, wp) = (grad.shape()[2], grad.shape()[3]);
            let ckk = cin * k * k;
            let out_plane = hp * wp;
            if needs(*bias) {
                let mut db = vec![S::zero(); cout];
                for bi in 0..batch {
                    for oc in 0..cout {
                        let s: S = grad.data()
                            [(bi * cout + oc) * out_plane..(bi * cout + oc + 1) * out_plane]
                            .iter()
                            .copied()
                            .sum();
                        db[oc] = db[oc] + s;
                    }
                }
                accumulate(grads, *bias, Tensor::from_vec(vec![cout], db));
            }
            let need_w = needs(*weight);
            let need_x = needs(*input);
            if need_w || need_x {
                let mut dw = vec![S::zero(); cout * ckk];
                let mut dx = vec![S::zero(); x.numel()];
                let mut cols = vec![S::zero(); ckk * out_plane];
                let mut dcols = vec![S::zero(); ckk * out_plane];
                for bi in 0..batch {
                    let g_b = &grad.data()[bi * cout * out_plane..(bi + 1) * cout * out_plane];
                    if need_w {
                        im2col(
                            &x.data()[bi * cin * h * w..],
                            cin,
                            h,
                            w,
                            k,
                            *stride,
                            *pad,
                            hp,
                            wp,
                            &mut cols,
                        );
                        // dW += g_b [Cout, HW] x cols^T [HW, CinKK]
                        S::gemm(cout, out_plane, ckk, g_b, false, &cols, true, &mut dw, true);
                    }
                    if need_x {
                        // dcols = W^T [CinKK, Cout] x g_b [Cout, HW]
                        S::gemm(
                            ckk,
                            cout,
                            out_plane,
                            wgt.data(),
                            true,
                            g_b,
                            false,
                            &mut dcols,
                            false,
                        );
                        col2im_add(
                            &dcols,
                            cin,
                            h,
                            w,
                            k,
                            *stride,
                            *pad,
                            hp,
                            wp,
                            &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w],
                        );
                    }
                }
                if need_w {
                    accumulate(
                        grads,
                        *weight,
                        Tensor::from_vec(wgt.shape().to_vec(), dw),
                    );
                }
                if need_x {
                    accumulate(grads, *input, Tensor::from_vec(x.shape().to_vec(), dx));
                }
            }
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let x = value(*input);
            let wgt = value(*weight);
            let (bsz, nin) = (x.shape()[0], x.shape()[1]);
            let nout = wgt.shape()[0];
            if needs(*bias) {
                let mut db = vec![S::zero(); nout];
                for row in grad.data().chunks_exact(nout) {
                    for (acc, g) in db.iter_mut().zip(row) {
                        *acc = *acc + *g;
                    }
                }
                accumulate(grads, *bias, Tensor::from_vec(vec![nout], db));
            }
            if needs(*weight) {
                let mut dw = vec![S::zero(); nout * nin];
                // dW = g^T [M, B] x x [B, N]
                S::gemm(nout, bsz, nin, grad.data(), true, x.data(), false, &mut dw, false);
                accumulate(grads, *weight, Tensor::from_vec(vec![nout, nin], dw));
            }
            if needs(*input) {
                let mut dx = vec![S::zero(); bsz * nin];
                // dx = g [B, M] x W [M, N]
                S::gemm(
                    bsz,
                    nout,
                    nin,
                    grad.data(),
                    false,
                    wgt.data(),
                    false,
                    &mut dx,
                    false,
                );
                accumulate(grads, *input, Tensor::from_vec(vec![bsz, nin], dx));
            }
        }
        Op::Relu { input } => {
            if needs(*input) {
                let x = value(*input);
                let dx: Vec<S> = x
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| if v > S::zero() { g } else { S::zero() })
                    .collect();
                accumulate(grads, *input, Tensor::from_vec(x.shape().to_vec(), dx));
            }
        }
        Op::Sigmoid { input } => {
            if needs(*input) {
                let y = &nodes[idx].value;
                let dx: Vec<S> = y
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&yv, &g)| g * yv * (S::one() - yv))
                    .collect();
                accumulate(grads, *input, Tensor::from_vec(y.shape().to_vec(), dx));
            }
        }
        Op::GlobalAvgPool { input } => {
            if needs(*input) {
                let x = value(*input);
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let plane = h * w;
                let norm = S::from_f64(1.0 / plane as f64);
                let mut dx = vec![S::zero(); x.numel()];
                for (i, g) in grad.data().iter().enumerate() {
                    let gv = *g * norm;
                    dx[i * plane..(i + 1) * plane].fill(gv);
                }
                accumulate(grads, *input, Tensor::from_vec(x.shape().to_vec(), dx));
            }
        }
        Op::MaxPool2 { input, argmax } => {
            if needs(*input) {
                let x = value(*input);
                let mut dx = vec![S::zero(); x.numel()];
                for (g, &at) in grad.data().iter().zip(argmax) {
                    dx[at as usize] = dx[at as usize] + *g;
                }
                accumulate(grads, *input, Tensor::from_vec(x.shape().to_vec(), dx));
            }
        }
        Op::Upsample2 { input } => {
            if needs(*input) {
                let x = value(*input);
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let (h2, w2) = (h * 2, w * 2);
                let mut dx = vec![S::zero(); x.numel()];
                for plane_idx in 0..x.shape()[0] * x.shape()[1] {
                    let g_plane = &grad.data()[plane_idx * h2 * w2..(plane_idx + 1) * h2 * w2];
                    let d_plane = &mut dx[plane_idx * h * w..(plane_idx + 1) * h * w];
                    for y in 0..h2 {
                        for x2 in 0..w2 {
                            let d = &mut d_plane[(y / 2) * w + (x2 / 2)];
                            *d = *d + g_plane[y * w2 + x2];
                        }
                    }
                }
                accumulate(grads, *input, Tensor::from_vec(x.shape().to_vec(), dx));
            }
        }
        Op::ConcatChannels { a, b } => {
            let sa = value(*a).shape().to_vec();
            let sb = value(*b).shape().to_vec();
            let plane = sa[2] * sa[3];
            let (ca, cb) = (sa[1], sb[1]);
            let ctot = ca + cb;
            if needs(*a) {
                let mut da = vec![S::zero(); value(*a).numel()];
                for bi in 0..sa[0] {
                    da[bi * ca * plane..(bi + 1) * ca * plane].copy_from_slice(
                        &grad.data()[bi * ctot * plane..bi * ctot * plane + ca * plane],
                    );
                }
                accumulate(grads, *a, Tensor::from_vec(sa.clone(), da));
            }
            if needs(*b) {
                let mut db = vec![S::zero(); value(*b).numel()];
                for bi in 0..sa[0] {
                    db[bi * cb * plane..(bi + 1) * cb * plane].copy_from_slice(
                        &grad.data()
                            [bi * ctot * plane + ca * plane..(bi + 1) * ctot * plane],
                    );
                }
                accumulate(grads, *b, Tensor::from_vec(sb, db));
            }
        }
        Op::ConcatVec { a, b } => {
            let sa = value(*a).shape().to_vec();
            let sb = value(*b).shape().to_vec();
            let (na, nb) = (sa[1], sb[1]);
            let ntot = na + nb;
            if needs(*a) {
                let mut da = vec![S::zero(); value(*a).numel()];
                for bi in 0..sa[0] {
                    da[bi * na..(bi + 1) * na]
                        .copy_from_slice(&grad.data()[bi * ntot..bi * ntot + na]);
                }
                accumulate(grads, *a, Tensor::from_vec(sa.clone(), da));
            }
            if needs(*b) {
                let mut db = vec![S::zero(); value(*b).numel()];
                for bi in 0..sa[0] {
                    db[bi * nb..(bi + 1) * nb]
                        .copy_from_slice(&grad.data()[bi * ntot + na..(bi + 1) * ntot]);
                }
                accumulate(grads, *b, Tensor::from_vec(sb, db));
            }
        }
        Op::ChannelScale { x, gate } => {
            let xv = value(*x);
            let gv = value(*gate);
            let plane = xv.shape()[2] * xv.shape()[3];
            if needs(*x) {
                let mut dx = vec![S::zero(); xv.numel()];
                for (i, g) in gv.data().iter().enumerate() {
                    for (d, up) in dx[i * plane..(i + 1) * plane]
                        .iter_mut()
                        .zip(&grad.data()[i * plane..(i + 1) * plane])
                    {
                        *d = *up * *g;
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(xv.shape().to_vec(), dx));
            }
            if needs(*gate) {
                let mut dg = vec![S::zero(); gv.numel()];
                for (i, slot) in dg.iter_mut().enumerate() {
                    let mut s = S::zero();
                    for (up, v) in grad.data()[i * plane..(i + 1) * plane]
                        .iter()
                        .zip(&xv.data()[i * plane..(i + 1) * plane])
                    {
                        s = s + *up * *v;
                    }
                    *slot = s;
                }
                accumulate(grads, *gate, Tensor::from_vec(gv.shape().to_vec(), dg));
            }
        }
        Op::ChannelBias { x, bias } => {
            let xv = value(*x);
            let bv = value(*bias);
            let plane = xv.shape()[2] * xv.shape()[3];
            if needs(*x) {
                accumulate(grads, *x, grad.clone());
            }
            if needs(*bias) {
                let mut db = vec![S::zero(); bv.numel()];
                for (i, slot) in db.iter_mut().enumerate() {
                    let s: S = grad.data()[i * plane..(i + 1) * plane].iter().copied().sum();
                    *slot = s;
                }
                accumulate(grads, *bias, Tensor::from_vec(bv.shape().to_vec(), db));
            }
        }
        Op::Reshape { input } => {
            if needs(*input) {
                let shape = value(*input).shape().to_vec();
                accumulate(grads, *input, grad.clone().reshaped(shape));
            }
        }
        Op::SliceCols { input, start } => {
            if needs(*input) {
                let xv = value(*input);
                let n = xv.shape()[1];
                let width = grad.shape()[1];
                let mut dx = vec![S::zero(); xv.numel()];
                for bi in 0..xv.shape()[0] {
                    dx[bi * n + start..bi * n + start + width]
                        .copy_from_slice(&grad.data()[bi * width..(bi + 1) * width]);
                }
                accumulate(grads, *input, Tensor::from_vec(xv.shape().to_vec(), dx));
            }
        }
        Op::Add { a, b } => {
            if needs(*a) {
                accumulate(grads, *a, grad.clone());
            }
            if needs(*b) {
                accumulate(grads, *b, grad.clone());
            }
        }
        Op::Mul { a, b } => {
            if needs(*a) {
                let db: Vec<S> = grad
                    .data()
                    .iter()
                    .zip(value(*b).data())
                    .map(|(&g, &v)| g * v)
                    .collect();
                accumulate(grads, *a, Tensor::from_vec(grad.shape().to_vec(), db));
            }
            if needs(*b) {
                let da: Vec<S> = grad
                    .data()
                    .iter()
                    .zip(value(*a).data())
                    .map(|(&g, &v)| g * v)
                    .collect();
                accumulate(grads, *b, Tensor::from_vec(grad.shape().to_vec(), da));
            }
        }
        Op::Scale { input, factor } => {
            if needs(*input) {
                let dx = grad.map(|g| g * *factor);
                accumulate(grads, *input, dx);
            }
        }
        Op::Sum { input } => {
            if needs(*input) {
                let xv = value(*input);
                accumulate(grads, *input, Tensor::full(xv.shape(), grad.item()));
            }
        }
        Op::BceWithLogits {
            pred,
            target,
            channel_weights,
        } => {
            if needs(*pred) {
                let z = value(*pred);
                let y = value(*target);
                let n = z.numel();
                let norm = S::from_f64(1.0 / n as f64) * grad.item();
                let plane = if z.rank() == 4 {
                    z.shape()[2] * z.shape()[3]
                } else {
                    1
                };
                let channels = if z.rank() == 4 { z.shape()[1] } else { 1 };
                let dz: Vec<S> = z
                    .data()
                    .iter()
                    .zip(y.data())
                    .enumerate()
                    .map(|(i, (&zi, &yi))| {
                        let w = match channel_weights {
                            Some(w) => w[(i / plane) % channels],
                            None => S::one(),
                        };
                        w * (sigmoid_scalar(zi) - yi) * norm
                    })
                    .collect();
                accumulate(grads, *pred, Tensor::from_vec(z.shape().to_vec(), dz));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tensor4(b: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(vec![b, c, h, w], data)
    }

    /// Independent quadruple-loop cross-correlation, written before the
    /// im2col path and kept as its oracle.
    fn conv2d_reference(
        input: &Tensor<f64>,
        weight: &Tensor<f64>,
        bias: &Tensor<f64>,
        pad: usize,
        stride: usize,
    ) -> Tensor<f64> {
        let (b, cin, h, w) = (
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        );
        let (cout, k) = (weight.shape()[0], weight.shape()[2]);
        let hp = (h + 2 * pad - k) / stride + 1;
        let wp = (w + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[b, cout, hp, wp]);
        for bi in 0..b {
            for oc in 0..cout {
                for oy in 0..hp {
                    for ox in 0..wp {
                        let mut acc = bias.data()[oc];
                        for ic in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy * stride + ky;
                                    let ix = ox * stride + kx;
                                    if iy < pad || ix < pad || iy >= h + pad || ix >= w + pad {
                                        continue;
                                    }
                                    let xi = input.data()
                                        [((bi * cin + ic) * h + (iy - pad)) * w + (ix - pad)];
                                    let wi = weight.data()[((oc * cin + ic) * k + ky) * k + kx];
                                    acc += xi * wi;
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + oc) * hp + oy) * wp + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol,
                "index {i}: {x} vs {y} (tol {tol})"
            );
        }
    }

    #[test]
    fn conv2d_scalar_kernel_doubles() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor4(1, 1, 3, 3, (1..=9).map(f64::from).collect()));
        let w = tape.leaf(tensor4(1, 1, 1, 1, vec![2.0]));
        let b = tape.leaf(Tensor::from_vec(vec![1], vec![0.0]));
        let y = conv2d(&mut tape, x, w, b, Padding::Same, 1).unwrap();
        let want: Vec<f64> = (1..=9).map(|v| 2.0 * f64::from(v)).collect();
        assert_eq!(tape.value(y).data(), &want[..]);
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (1..=9).map(f64::from).collect();
        let x = tape.leaf(tensor4(1, 1, 3, 3, data.clone()));
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let w = tape.leaf(tensor4(1, 1, 3, 3, kernel));
        let b = tape.leaf(Tensor::from_vec(vec![1], vec![0.0]));
        let y = conv2d(&mut tape, x, w, b, Padding::Same, 1).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv2d_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::random(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let w = Tensor::random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = Tensor::random(&mut rng, &[3], -1.0, 1.0);
        for (padding, pad) in [(Padding::Same, 1), (Padding::Valid, 0)] {
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone());
            let wi = tape.leaf(w.clone());
            let bi = tape.leaf(b.clone());
            let y = conv2d(&mut tape, xi, wi, bi, padding, 1).unwrap();
            let want = conv2d_reference(&x, &w, &b, pad, 1);
            assert_eq!(tape.value(y).shape(), want.shape());
            assert_close(tape.value(y).data(), want.data(), 1e-6);
        }
    }

    #[test]
    fn conv2d_strided_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::random(&mut rng, &[2, 3, 7, 7], -1.0, 1.0);
        let w = Tensor::random(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let b = Tensor::random(&mut rng, &[4], -1.0, 1.0);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.leaf(w.clone());
        let bi = tape.leaf(b.clone());
        let y = conv2d(&mut tape, xi, wi, bi, Padding::Valid, 2).unwrap();
        let want = conv2d_reference(&x, &w, &b, 0, 2);
        assert_close(tape.value(y).data(), want.data(), 1e-6);
    }

    #[test]
    fn conv2d_shape_mismatch_names_dimension() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[1, 2, 4, 4]));
        let w = tape.leaf(Tensor::<f64>::zeros(&[3, 5, 3, 3]));
        let b = tape.leaf(Tensor::<f64>::zeros(&[3]));
        let err = conv2d(&mut tape, x, w, b, Padding::Same, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channels"), "unexpected message: {msg}");
    }

    #[test]
    fn conv2d_is_linear_in_input_with_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::random(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
        let w = Tensor::random(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let b = Tensor::<f64>::zeros(&[2]);
        let alpha = 3.25;
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = conv2d(&mut tape, xi, wi, bi, Padding::Same, 1).unwrap();
        let scaled_out: Vec<f64> = tape.value(y).data().iter().map(|v| v * alpha).collect();
        let mut tape2 = Tape::new();
        let xs = tape2.leaf(x.map(|v| v * alpha));
        let (wi2, bi2) = (tape2.leaf(w), tape2.leaf(b));
        let y2 = conv2d(&mut tape2, xs, wi2, bi2, Padding::Same, 1).unwrap();
        assert_close(tape2.value(y2).data(), &scaled_out, 1e-9);
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]));
        let y = relu(&mut tape, x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = tape.leaf(Tensor::scalar(0.0));
        let s = sigmoid(&mut tape, z);
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn sigmoid_backward_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(Tensor::scalar(0.0));
        let s = sigmoid(&mut tape, x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.node(x).unwrap().item(), 0.25);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![-500.0, 500.0]));
        let s = sigmoid(&mut tape, x);
        let out = tape.value(s).data();
        assert!(out[0] >= 0.0 && out[0] < 1e-100);
        assert_eq!(out[1], 1.0);
        assert!(tape.poison().is_none());
    }

    #[test]
    fn linear_identity_weight_passes_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = linear(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn linear_hand_expanded_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]));
        let w = tape.leaf(Tensor::from_vec(vec![2, 2], vec![1.0, 1.0, 0.0, 1.0]));
        let b = tape.leaf(Tensor::from_vec(vec![2], vec![0.5, 0.0]));
        let y = linear(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5, 2.0]);
    }

    #[test]
    fn linear_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::random(&mut rng, &[2, 8], -1.0, 1.0);
        let w = Tensor::random(&mut rng, &[5, 8], -1.0, 1.0);
        let b = Tensor::random(&mut rng, &[5], -1.0, 1.0);
        let mut want = vec![0.0; 2 * 5];
        for bi in 0..2 {
            for m in 0..5 {
                let mut acc = b.data()[m];
                for n in 0..8 {
                    acc += x.data()[bi * 8 + n] * w.data()[m * 8 + n];
                }
                want[bi * 5 + m] = acc;
            }
        }
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
        let y = linear(&mut tape, xi, wi, bi).unwrap();
        assert_close(tape.value(y).data(), &want, 1e-6);
    }

    #[test]
    fn global_avg_pool_values_and_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(tensor4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = global_avg_pool(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        let s = scale(&mut tape, y, 3.0);
        let loss = sum(&mut tape, s);
        let grads = tape.backward(loss).unwrap();
        // Upstream grad 3 per channel spreads as 3 / (H*W) per pixel.
        assert_eq!(grads.node(x).unwrap().data(), &[0.75; 4]);

        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::full(&[2, 3, 4, 4], 7.5f64));
        let y = global_avg_pool(&mut tape, c).unwrap();
        assert_eq!(tape.value(y).data(), &[7.5; 6]);
    }

    #[test]
    fn maxpool2_and_upsample_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = maxpool2(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let v = tape.leaf(tensor4(1, 1, 1, 1, vec![2.5]));
        let u = upsample_nearest2(&mut tape, v).unwrap();
        assert_eq!(tape.value(u).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(u).data(), &[2.5; 4]);
    }

    #[test]
    fn maxpool2_rejects_odd_extents() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[1, 1, 3, 4]));
        assert!(maxpool2(&mut tape, x).is_err());
    }

    #[test]
    fn maxpool2_backward_routes_to_argmax_only() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(tensor4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = maxpool2(&mut tape, x).unwrap();
        let loss = sum(&mut tape, y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.node(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_of_upsample_is_identity_on_constant_maps() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 4, 4], -1.25f64));
        let u = upsample_nearest2(&mut tape, x).unwrap();
        let p = maxpool2(&mut tape, u).unwrap();
        assert_eq!(tape.value(p).data(), tape.value(x).data());
    }

    #[test]
    fn concat_vec_values_and_empty_operand() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::from_vec(vec![1, 1], vec![3.0]));
        let y = concat_vec(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);

        let empty = tape.leaf(Tensor::from_vec(vec![1, 0], vec![]));
        let y2 = concat_vec(&mut tape, a, empty).unwrap();
        assert_eq!(tape.value(y2).data(), &[1.0, 2.0]);
    }

    #[test]
    fn concat_backward_splits_at_boundary() {
        let mut tape = Tape::new();
        let a = tape.leaf_grad(Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.leaf_grad(Tensor::from_vec(vec![1, 1], vec![3.0]));
        let y = concat_vec(&mut tape, a, b).unwrap();
        let w = tape.leaf(Tensor::from_vec(vec![1, 3], vec![10.0, 20.0, 30.0]));
        let prod = mul(&mut tape, y, w).unwrap();
        let loss = sum(&mut tape, prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.node(a).unwrap().data(), &[10.0, 20.0]);
        assert_eq!(grads.node(b).unwrap().data(), &[30.0]);
    }

    #[test]
    fn channel_scale_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor4(1, 2, 2, 2, (1..=8).map(f64::from).collect()));
        let ones = tape.leaf(Tensor::full(&[1, 2], 1.0f64));
        let y = channel_scale(&mut tape, x, ones).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let half = tape.leaf(Tensor::full(&[1, 2], 0.5f64));
        let y2 = channel_scale(&mut tape, x, half).unwrap();
        let want: Vec<f64> = (1..=8).map(|v| f64::from(v) * 0.5).collect();
        assert_eq!(tape.value(y2).data(), &want[..]);
    }

    #[test]
    fn channel_scale_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::random(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let g = Tensor::random(&mut rng, &[2, 3], -1.0, 1.0);
        let mut want = vec![0.0; x.numel()];
        for b in 0..2 {
            for c in 0..3 {
                for p in 0..16 {
                    let i = (b * 3 + c) * 16 + p;
                    want[i] = x.data()[i] * g.data()[b * 3 + c];
                }
            }
        }
        let mut tape = Tape::new();
        let (xi, gi) = (tape.leaf(x), tape.leaf(g));
        let y = channel_scale(&mut tape, xi, gi).unwrap();
        assert_close(tape.value(y).data(), &want, 1e-6);
    }

    #[test]
    fn channel_scale_distributes_over_addition() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::random(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let b = Tensor::random(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let g = Tensor::random(&mut rng, &[1, 2], -1.0, 1.0);
        let mut tape = Tape::<f64>::new();
        let (ai, bi, gi) = (tape.leaf(a), tape.leaf(b), tape.leaf(g));
        let ab = add(&mut tape, ai, bi).unwrap();
        let lhs = channel_scale(&mut tape, ab, gi).unwrap();
        let sa = channel_scale(&mut tape, ai, gi).unwrap();
        let sb = channel_scale(&mut tape, bi, gi).unwrap();
        let rhs = add(&mut tape, sa, sb).unwrap();
        assert_close(tape.value(lhs).data(), tape.value(rhs).data(), 1e-12);
    }

    #[test]
    fn bce_of_zero_logits_is_ln_two() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::<f64>::zeros(&[1, 1, 2, 2]));
        let y = tape.leaf(tensor4(1, 1, 2, 2, vec![0.0, 1.0, 0.0, 1.0]));
        let loss = bce_with_logits(&mut tape, z, y, None).unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_saturates_to_zero_on_confident_correct_logits() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::full(&[1, 1, 2, 2], 20.0f64));
        let y = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0f64));
        let loss = bce_with_logits(&mut tape, z, y, None).unwrap();
        assert!(tape.value(loss).item() < 1e-8);
    }

    #[test]
    fn bce_matches_clamped_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let z = Tensor::<f64>::random(&mut rng, &[2, 1, 4, 4], -4.0, 4.0);
        let y = Tensor::<f64>::from_vec(
            vec![2, 1, 4, 4],
            (0..32).map(|i| f64::from(i % 2 == 0)).collect(),
        );
        // Naive formula with probability clamping, independent of the
        // log-sum-exp path under test.
        let mut want = 0.0;
        for (&zi, yi) in z.data().iter().zip(y.data()) {
            let p = (1.0 / (1.0 + (-zi).exp())).clamp(1e-12, 1.0 - 1e-12);
            want -= yi * p.ln() + (1.0 - yi) * (1.0 - p).ln();
        }
        want /= 32.0;
        let mut tape = Tape::new();
        let (zi, yi) = (tape.leaf(z), tape.leaf(y));
        let loss = bce_with_logits(&mut tape, zi, yi, None).unwrap();
        assert!((tape.value(loss).item() - want).abs() < 1e-6);
    }

    #[test]
    fn bce_rejects_non_binary_target() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::<f64>::zeros(&[1, 1, 2, 2]));
        let y = tape.leaf(Tensor::full(&[1, 1, 2, 2], 0.5f64));
        assert!(bce_with_logits(&mut tape, z, y, None).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(Tensor::from_vec(vec![4], vec![1.0, -2.0, 3.0, 0.5]));
        let loss = sum(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.node(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut tape = Tape::new();
        let data = vec![1.0, -2.0, 3.0, 0.5];
        let x = tape.leaf_grad(Tensor::from_vec(vec![4], data.clone()));
        let sq = mul(&mut tape, x, x).unwrap();
        let loss = sum(&mut tape, sq);
        let grads = tape.backward(loss).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.node(x).unwrap().data(), &want[..]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(Tensor::from_vec(vec![2], vec![1.0, 2.0]));
        let y = relu(&mut tape, x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn shared_parameter_accumulates_both_contributions() {
        // loss = sum(x * x_used_twice): d/dx of a*x + b*x where the same
        // node feeds two product branches. Oracle: grads from two
        // independent leaves summed.
        let mut tape = Tape::new();
        let data = vec![1.5, -0.5];
        let a = vec![2.0, 3.0];
        let b = vec![-1.0, 4.0];
        let x = tape.leaf_grad(Tensor::from_vec(vec![2], data.clone()));
        let ca = tape.leaf(Tensor::from_vec(vec![2], a.clone()));
        let cb = tape.leaf(Tensor::from_vec(vec![2], b.clone()));
        let pa = mul(&mut tape, x, ca).unwrap();
        let pb = mul(&mut tape, x, cb).unwrap();
        let both = add(&mut tape, pa, pb).unwrap();
        let loss = sum(&mut tape, both);
        let grads = tape.backward(loss).unwrap();
        let want: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert_eq!(grads.node(x).unwrap().data(), &want[..]);
    }

    #[test]
    fn composite_net_matches_finite_differences() {
        use crate::grad_check::finite_diff_check;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = Tensor::random(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let w = Tensor::random(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
        let b = Tensor::random(&mut rng, &[3], -0.1, 0.1);
        let lw = Tensor::random(&mut rng, &[1, 12], -0.5, 0.5);
        let lb = Tensor::random(&mut rng, &[1], -0.1, 0.1);
        let f = move |tape: &mut Tape<f64>, x: NodeId| -> crate::Result<NodeId> {
            let wi = tape.leaf(w.clone());
            let bi = tape.leaf(b.clone());
            let c = conv2d(tape, x, wi, bi, Padding::Same, 1)?;
            let r = relu(tape, c);
            let p = maxpool2(tape, r)?;
            let flat_len = tape.value(p).numel();
            let pf = reshape_rows(tape, p, flat_len)?;
            let lwi = tape.leaf(lw.clone());
            let lbi = tape.leaf(lb.clone());
            let y = linear(tape, pf, lwi, lbi)?;
            Ok(sum(tape, y))
        };
        let err = finite_diff_check(&f, &x, 1e-4).unwrap();
        assert!(err <= 1e-5, "max rel err {err}");
    }

    #[test]
    fn finite_diff_check_of_sum_is_tiny() {
        use crate::grad_check::finite_diff_check;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::random(&mut rng, &[3, 3], -2.0, 2.0);
        let f = |tape: &mut Tape<f64>, x: NodeId| -> crate::Result<NodeId> { Ok(sum(tape, x)) };
        let err = finite_diff_check(&f, &x, 1e-4).unwrap();
        assert!(err < 1e-10, "max rel err {err}");
    }

    #[test]
    fn finite_diff_check_of_bce_is_small() {
        use crate::grad_check::finite_diff_check;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::random(&mut rng, &[2, 1, 3, 3], -3.0, 3.0);
        let target = Tensor::<f64>::from_vec(
            vec![2, 1, 3, 3],
            (0..18).map(|i| f64::from(i % 3 == 0)).collect(),
        );
        let f = move |tape: &mut Tape<f64>, x: NodeId| -> crate::Result<NodeId> {
            let t = tape.leaf(target.clone());
            bce_with_logits(tape, x, t, None)
        };
        let err = finite_diff_check(&f, &x, 1e-4).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn forward_is_deterministic_bit_for_bit() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = Tensor::<f32>::random(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
            let w = Tensor::random(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
            let b = Tensor::random(&mut rng, &[4], -0.1, 0.1);
            let mut tape = Tape::new();
            let (xi, wi, bi) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
            let c = conv2d(&mut tape, xi, wi, bi, Padding::Same, 1).unwrap();
            let r = relu(&mut tape, c);
            let p = maxpool2(&mut tape, r).unwrap();
            tape.value(p).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
