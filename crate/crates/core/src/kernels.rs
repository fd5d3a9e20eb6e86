//! Low-level numeric kernels behind the tape operations.
//!
//! Everything here works on plain `f64` arrays with explicit loops plus
//! [`general_mat_mul`] for the GEMM-shaped parts; iteration orders are fixed,
//! which keeps results bit-reproducible run to run. Shape agreement is the
//! caller's responsibility (the tape ops validate), so kernels only
//! `debug_assert` it.

use crate::tape::Arr;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayView3, ArrayViewMut3, Axis, Ix3, Ix4, IxDyn};

/// Upper bound on the scratch im2col buffer, in elements (32 MiB of f64).
const MAX_COL_ELEMS: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dSpec {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }
}

/// Fills `col` (K, p1-p0) with the im2col patch matrix of `xg` for flattened
/// output positions `p0..p1`. K = C * kh * kw, positions run row-major over
/// the output plane.
fn im2col_fill(
    xg: &ArrayView3<'_, f64>,
    spec: &Conv2dSpec,
    wo: usize,
    p0: usize,
    p1: usize,
    col: &mut Array2<f64>,
) {
    let (cing, h, w) = xg.dim();
    for ci in 0..cing {
        for ky in 0..spec.kh {
            for kx in 0..spec.kw {
                let r = (ci * spec.kh + ky) * spec.kw + kx;
                let mut crow = col.row_mut(r);
                let crow = crow.as_slice_mut().expect("col is standard layout");
                let mut p = p0;
                while p < p1 {
                    let oy = p / wo;
                    let row_end = ((oy + 1) * wo).min(p1);
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        for q in p..row_end {
                            crow[q - p0] = 0.0;
                        }
                    } else {
                        let xrow = xg.slice(s![ci, iy as usize, ..]);
                        let xrow = xrow.as_slice().expect("input rows are contiguous");
                        for q in p..row_end {
                            let ox = q % wo;
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            crow[q - p0] = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                xrow[ix as usize]
                            };
                        }
                    }
                    p = row_end;
                }
            }
        }
    }
}

/// Scatter-adds an im2col-layout gradient back onto the input plane.
fn col2im_add(
    gx: &mut ArrayViewMut3<'_, f64>,
    spec: &Conv2dSpec,
    wo: usize,
    p0: usize,
    p1: usize,
    col: &Array2<f64>,
) {
    let (cing, h, w) = gx.dim();
    for ci in 0..cing {
        for ky in 0..spec.kh {
            for kx in 0..spec.kw {
                let r = (ci * spec.kh + ky) * spec.kw + kx;
                let crow = col.row(r);
                let crow = crow.as_slice().expect("col is standard layout");
                let mut p = p0;
                while p < p1 {
                    let oy = p / wo;
                    let row_end = ((oy + 1) * wo).min(p1);
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy >= 0 && iy < h as isize {
                        for q in p..row_end {
                            let ox = q % wo;
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                gx[[ci, iy as usize, ix as usize]] += crow[q - p0];
                            }
                        }
                    }
                    p = row_end;
                }
            }
        }
    }
}

fn chunk_len(k: usize, positions: usize) -> usize {
    (MAX_COL_ELEMS / k.max(1)).clamp(1, positions.max(1))
}

/// Grouped 2D convolution, NCHW x (Cout, Cin/g, kh, kw) -> NCHW.
pub(crate) fn conv2d_fwd(x: &Arr, w: &Arr, bias: Option<&Arr>, spec: &Conv2dSpec) -> Arr {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
    let (b, cin, h, wd) = x4.dim();
    let (cout, cing, kh, kw) = w4.dim();
    debug_assert_eq!(cin, cing * spec.groups);
    debug_assert_eq!(cout % spec.groups, 0);
    debug_assert_eq!((kh, kw), (spec.kh, spec.kw));
    let coutg = cout / spec.groups;
    let (ho, wo) = spec.out_hw(h, wd);
    let positions = ho * wo;
    let k = cing * kh * kw;
    let trivial_1x1 = kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0;

    let mut out = Arr::zeros(IxDyn(&[b, cout, ho, wo]));
    let mut out4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
    let chunk = chunk_len(k, positions);
    let mut col = Array2::<f64>::zeros((k, chunk));
    for bi in 0..b {
        for g in 0..spec.groups {
            let xg = x4.slice(s![bi, g * cing..(g + 1) * cing, .., ..]);
            let wg = w4.slice(s![g * coutg..(g + 1) * coutg, .., .., ..]);
            let wg2: ArrayView2<'_, f64> = wg
                .into_shape_with_order((coutg, k))
                .expect("weights are standard layout");
            let og = out4.slice_mut(s![bi, g * coutg..(g + 1) * coutg, .., ..]);
            let mut og2 = og
                .into_shape_with_order((coutg, positions))
                .expect("output is standard layout");
            if trivial_1x1 {
                // `to_shape` borrows when the slice is contiguous and copies
                // otherwise (e.g. channel-concatenated inputs).
                let xg2 = xg.to_shape((cing, positions)).expect("element count matches");
                general_mat_mul(1.0, &wg2, &xg2.view(), 0.0, &mut og2);
            } else {
                let mut p0 = 0;
                while p0 < positions {
                    let p1 = (p0 + chunk).min(positions);
                    im2col_fill(&xg, spec, wo, p0, p1, &mut col);
                    let col_v = col.slice(s![.., 0..p1 - p0]);
                    let mut out_v = og2.slice_mut(s![.., p0..p1]);
                    general_mat_mul(1.0, &wg2, &col_v, 0.0, &mut out_v);
                    p0 = p1;
                }
            }
        }
    }
    if let Some(bias) = bias {
        let bias = bias.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for bi in 0..b {
            for co in 0..cout {
                out4.slice_mut(s![bi, co, .., ..]).mapv_inplace(|v| v + bias[co]);
            }
        }
    }
    out
}

/// Gradient of [`conv2d_fwd`] with respect to its input.
pub(crate) fn conv2d_bwd_input(w: &Arr, gout: &Arr, in_shape: &[usize], spec: &Conv2dSpec) -> Arr {
    let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
    let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
    let (cout, cing, kh, kw) = w4.dim();
    let (b, gcout, ho, wo) = g4.dim();
    debug_assert_eq!(gcout, cout);
    let coutg = cout / spec.groups;
    let positions = ho * wo;
    let k = cing * kh * kw;
    let trivial_1x1 = kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0;

    let mut gx = Arr::zeros(IxDyn(in_shape));
    let mut gx4 = gx.view_mut().into_dimensionality::<Ix4>().unwrap();
    let chunk = chunk_len(k, positions);
    let mut col = Array2::<f64>::zeros((k, chunk));
    for bi in 0..b {
        for g in 0..spec.groups {
            let wg = w4.slice(s![g * coutg..(g + 1) * coutg, .., .., ..]);
            let wg2 = wg
                .into_shape_with_order((coutg, k))
                .expect("weights are standard layout");
            let gg = g4.slice(s![bi, g * coutg..(g + 1) * coutg, .., ..]);
            let gg2 = gg
                .into_shape_with_order((coutg, positions))
                .expect("gradient slice is contiguous");
            let mut gxg = gx4.slice_mut(s![bi, g * cing..(g + 1) * cing, .., ..]);
            if trivial_1x1 {
                let mut gx2 = gxg
                    .view_mut()
                    .into_shape_with_order((cing, positions))
                    .expect("input gradient slice is contiguous");
                general_mat_mul(1.0, &wg2.t(), &gg2, 0.0, &mut gx2);
            } else {
                let mut p0 = 0;
                while p0 < positions {
                    let p1 = (p0 + chunk).min(positions);
                    let gg_v = gg2.slice(s![.., p0..p1]);
                    let mut col_v = col.slice_mut(s![.., 0..p1 - p0]);
                    general_mat_mul(1.0, &wg2.t(), &gg_v, 0.0, &mut col_v);
                    col2im_add(&mut gxg, spec, wo, p0, p1, &col);
                    p0 = p1;
                }
            }
        }
    }
    gx
}

/// Gradients of [`conv2d_fwd`] with respect to the weights and bias.
pub(crate) fn conv2d_bwd_params(
    x: &Arr,
    gout: &Arr,
    w_shape: &[usize],
    with_bias: bool,
    spec: &Conv2dSpec,
) -> (Arr, Option<Arr>) {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
    let (b, _cin, _h, _w) = x4.dim();
    let (_, gcout, ho, wo) = g4.dim();
    let (cout, cing, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    debug_assert_eq!(gcout, cout);
    let coutg = cout / spec.groups;
    let positions = ho * wo;
    let k = cing * kh * kw;
    let trivial_1x1 = kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0;

    let mut gw = Arr::zeros(IxDyn(w_shape));
    {
        let gw4 = gw.view_mut().into_dimensionality::<Ix4>().unwrap();
        let mut gw2_all = gw4
            .into_shape_with_order((cout, k))
            .expect("weight gradient is standard layout");
        let chunk = chunk_len(k, positions);
        let mut col = Array2::<f64>::zeros((k, chunk));
        for bi in 0..b {
            for g in 0..spec.groups {
                let xg = x4.slice(s![bi, g * cing..(g + 1) * cing, .., ..]);
                let gg = g4.slice(s![bi, g * coutg..(g + 1) * coutg, .., ..]);
                let gg2 = gg
                    .into_shape_with_order((coutg, positions))
                    .expect("gradient slice is contiguous");
                let mut gwg = gw2_all.slice_mut(s![g * coutg..(g + 1) * coutg, ..]);
                if trivial_1x1 {
                    let xg2 = xg
                        .into_shape_with_order((cing, positions))
                        .expect("input slice is contiguous");
                    general_mat_mul(1.0, &gg2, &xg2.t(), 1.0, &mut gwg);
                } else {
                    let mut p0 = 0;
                    while p0 < positions {
                        let p1 = (p0 + chunk).min(positions);
                        im2col_fill(&xg, spec, wo, p0, p1, &mut col);
                        let col_v = col.slice(s![.., 0..p1 - p0]);
                        let gg_v = gg2.slice(s![.., p0..p1]);
                        general_mat_mul(1.0, &gg_v, &col_v.t(), 1.0, &mut gwg);
                        p0 = p1;
                    }
                }
            }
        }
    }
    let gb = with_bias.then(|| {
        let summed = gout
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .sum_axis(Axis(0));
        summed.into_dyn()
    });
    (gw, gb)
}

/// 2x2 max pooling with stride 2 (floor semantics for odd sizes). Returns the
/// pooled map and, per output element, which of the four inputs won (row-major
/// `dy * 2 + dx`), for the backward pass.
pub(crate) fn maxpool2_fwd(x: &Arr) -> (Arr, Vec<u8>) {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x4.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Arr::zeros(IxDyn(&[b, c, ho, wo]));
    let mut arg = vec![0u8; b * c * ho * wo];
    let mut i = 0;
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut which = 0u8;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x4[[bi, ci, 2 * oy + dy, 2 * ox + dx]];
                            if v > best {
                                best = v;
                                which = (dy * 2 + dx) as u8;
                            }
                        }
                    }
                    out[[bi, ci, oy, ox]] = best;
                    arg[i] = which;
                    i += 1;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_bwd(arg: &[u8], gout: &Arr, in_shape: &[usize]) -> Arr {
    let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, ho, wo) = g4.dim();
    let mut gx = Arr::zeros(IxDyn(in_shape));
    let mut i = 0;
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let which = arg[i] as usize;
                    let (dy, dx) = (which / 2, which % 2);
                    gx[[bi, ci, 2 * oy + dy, 2 * ox + dx]] += g4[[bi, ci, oy, ox]];
                    i += 1;
                }
            }
        }
    }
    gx
}

/// Nearest-neighbour x2 upsampling.
pub(crate) fn upsample2_fwd(x: &Arr) -> Arr {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x4.dim();
    let mut out = Arr::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = x4[[bi, ci, y, x]];
                    out[[bi, ci, 2 * y, 2 * x]] = v;
                    out[[bi, ci, 2 * y, 2 * x + 1]] = v;
                    out[[bi, ci, 2 * y + 1, 2 * x]] = v;
                    out[[bi, ci, 2 * y + 1, 2 * x + 1]] = v;
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2_bwd(gout: &Arr) -> Arr {
    let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h2, w2) = g4.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Arr::zeros(IxDyn(&[b, c, h, w]));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    gx[[bi, ci, y, x]] = g4[[bi, ci, 2 * y, 2 * x]]
                        + g4[[bi, ci, 2 * y, 2 * x + 1]]
                        + g4[[bi, ci, 2 * y + 1, 2 * x]]
                        + g4[[bi, ci, 2 * y + 1, 2 * x + 1]];
                }
            }
        }
    }
    gx
}

/// Mirror index without edge repetition (reflect-101), bouncing as needed.
pub(crate) fn reflect_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// Reflect-pads the spatial axes by (top, bottom, left, right).
pub(crate) fn pad_reflect_fwd(x: &Arr, pads: (usize, usize, usize, usize)) -> Arr {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x4.dim();
    let (top, bottom, left, right) = pads;
    let (oh, ow) = (h + top + bottom, w + left + right);
    let mut out = Arr::zeros(IxDyn(&[b, c, oh, ow]));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                let sy = reflect_index(oy as isize - top as isize, h);
                for ox in 0..ow {
                    let sx = reflect_index(ox as isize - left as isize, w);
                    out[[bi, ci, oy, ox]] = x4[[bi, ci, sy, sx]];
                }
            }
        }
    }
    out
}

/// Crops the spatial window starting at (top, left).
pub(crate) fn crop2d_fwd(x: &Arr, top: usize, left: usize, h: usize, w: usize) -> Arr {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    x4.slice(s![.., .., top..top + h, left..left + w])
        .to_owned()
        .into_dyn()
}

pub(crate) fn crop2d_bwd(gout: &Arr, in_shape: &[usize], top: usize, left: usize) -> Arr {
    let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
    let (_, _, h, w) = g4.dim();
    let mut gx = Arr::zeros(IxDyn(in_shape));
    gx.view_mut()
        .into_dimensionality::<Ix4>()
        .unwrap()
        .slice_mut(s![.., .., top..top + h, left..left + w])
        .assign(&g4);
    gx
}

/// Cyclic shift of the spatial axes: `out[y, x] = in[(y - sy) mod H, (x - sx) mod W]`.
pub(crate) fn roll2d(x: &Arr, sy: isize, sx: isize) -> Arr {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x4.dim();
    let mut out = Arr::zeros(IxDyn(&[b, c, h, w]));
    let modp = |v: isize, n: usize| -> usize {
        let n = n as isize;
        (((v % n) + n) % n) as usize
    };
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                let sy_idx = modp(y as isize - sy, h);
                for x in 0..w {
                    let sx_idx = modp(x as isize - sx, w);
                    out[[bi, ci, y, x]] = x4[[bi, ci, sy_idx, sx_idx]];
                }
            }
        }
    }
    out
}

/// Rearranges NCHW into per-window token batches:
/// `(B, C, H, W) -> (B * nh * nw, win * win, C)`. H and W must divide by `win`.
pub(crate) fn window_partition_fwd(x: &Arr, win: usize) -> Arr {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x4.dim();
    let (nh, nw) = (h / win, w / win);
    let mut out = Arr::zeros(IxDyn(&[b * nh * nw, win * win, c]));
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                let g = (bi * nh + wy) * nw + wx;
                for ty in 0..win {
                    for tx in 0..win {
                        let t = ty * win + tx;
                        for ci in 0..c {
                            out[[g, t, ci]] = x4[[bi, ci, wy * win + ty, wx * win + tx]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`window_partition_fwd`].
pub(crate) fn window_partition_bwd(gout: &Arr, b: usize, c: usize, h: usize, w: usize, win: usize) -> Arr {
    let g3 = gout.view().into_dimensionality::<Ix3>().unwrap();
    let (nh, nw) = (h / win, w / win);
    let mut gx = Arr::zeros(IxDyn(&[b, c, h, w]));
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                let g = (bi * nh + wy) * nw + wx;
                for ty in 0..win {
                    for tx in 0..win {
                        let t = ty * win + tx;
                        for ci in 0..c {
                            gx[[bi, ci, wy * win + ty, wx * win + tx]] = g3[[g, t, ci]];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// `(G, T, C) -> (G, heads, T, C / heads)`.
pub(crate) fn split_heads_fwd(x: &Arr, heads: usize) -> Arr {
    let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
    let (g, t, c) = x3.dim();
    let d = c / heads;
    let mut out = Arr::zeros(IxDyn(&[g, heads, t, d]));
    for gi in 0..g {
        for hh in 0..heads {
            for ti in 0..t {
                for di in 0..d {
                    out[[gi, hh, ti, di]] = x3[[gi, ti, hh * d + di]];
                }
            }
        }
    }
    out
}

/// `(G, heads, T, d) -> (G, T, heads * d)`; also the adjoint of
/// [`split_heads_fwd`].
pub(crate) fn merge_heads_fwd(x: &Arr) -> Arr {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (g, heads, t, d) = x4.dim();
    let mut out = Arr::zeros(IxDyn(&[g, t, heads * d]));
    for gi in 0..g {
        for hh in 0..heads {
            for ti in 0..t {
                for di in 0..d {
                    out[[gi, ti, hh * d + di]] = x4[[gi, hh, ti, di]];
                }
            }
        }
    }
    out
}

/// Batched matrix products over the leading axes; both operands are reshaped
/// to `(N, _, _)` by the caller.
pub(crate) fn bmm(a: &Arr, b: &Arr, ta: bool, tb: bool) -> Arr {
    let a3 = a.view().into_dimensionality::<Ix3>().unwrap();
    let b3 = b.view().into_dimensionality::<Ix3>().unwrap();
    let n = a3.dim().0;
    debug_assert_eq!(n, b3.dim().0);
    let m = if ta { a3.dim().2 } else { a3.dim().1 };
    let p = if tb { b3.dim().1 } else { b3.dim().2 };
    let mut out = Arr::zeros(IxDyn(&[n, m, p]));
    let mut o3 = out.view_mut().into_dimensionality::<Ix3>().unwrap();
    for i in 0..n {
        let av = a3.index_axis(Axis(0), i);
        let bv = b3.index_axis(Axis(0), i);
        let mut ov = o3.index_axis_mut(Axis(0), i);
        match (ta, tb) {
            (false, false) => general_mat_mul(1.0, &av, &bv, 0.0, &mut ov),
            (false, true) => general_mat_mul(1.0, &av, &bv.t(), 0.0, &mut ov),
            (true, false) => general_mat_mul(1.0, &av.t(), &bv, 0.0, &mut ov),
            (true, true) => general_mat_mul(1.0, &av.t(), &bv.t(), 0.0, &mut ov),
        }
    }
    out
}

/// Layer norm over the channel axis of NCHW maps.
pub(crate) fn ln_channel_fwd(x: &Arr, gamma: &Arr, beta: &Arr, eps: f64) -> Arr {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x4.dim();
    let mut out = Arr::zeros(IxDyn(&[b, c, h, w]));
    let gs = gamma.as_slice().unwrap();
    let bs = beta.as_slice().unwrap();
    for bi in 0..b {
        for y in 0..h {
            for x_ in 0..w {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += x4[[bi, ci, y, x_]];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = x4[[bi, ci, y, x_]] - mean;
                    var += d * d;
                }
                var /= c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for ci in 0..c {
                    out[[bi, ci, y, x_]] =
                        (x4[[bi, ci, y, x_]] - mean) * inv * gs[ci] + bs[ci];
                }
            }
        }
    }
    out
}

/// Backward of [`ln_channel_fwd`]; returns (gx, ggamma, gbeta).
pub(crate) fn ln_channel_bwd(
    x: &Arr,
    gamma: &Arr,
    gout: &Arr,
    eps: f64,
) -> (Arr, Arr, Arr) {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x4.dim();
    let gs = gamma.as_slice().unwrap();
    let mut gx = Arr::zeros(IxDyn(&[b, c, h, w]));
    let mut ggamma = Arr::zeros(IxDyn(&[c]));
    let mut gbeta = Arr::zeros(IxDyn(&[c]));
    let cf = c as f64;
    for bi in 0..b {
        for y in 0..h {
            for x_ in 0..w {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += x4[[bi, ci, y, x_]];
                }
                mean /= cf;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = x4[[bi, ci, y, x_]] - mean;
                    var += d * d;
                }
                var /= cf;
                let inv = 1.0 / (var + eps).sqrt();
                // Accumulate the two reductions the gradient needs.
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for ci in 0..c {
                    let xhat = (x4[[bi, ci, y, x_]] - mean) * inv;
                    let go = g4[[bi, ci, y, x_]];
                    let dxhat = go * gs[ci];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    ggamma[[ci]] += go * xhat;
                    gbeta[[ci]] += go;
                }
                for ci in 0..c {
                    let xhat = (x4[[bi, ci, y, x_]] - mean) * inv;
                    let dxhat = g4[[bi, ci, y, x_]] * gs[ci];
                    gx[[bi, ci, y, x_]] =
                        inv * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf);
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Layer norm over the last axis of a token tensor of any rank.
pub(crate) fn ln_last_fwd(x: &Arr, gamma: &Arr, beta: &Arr, eps: f64) -> Arr {
    let c = *x.shape().last().unwrap();
    let mut out = x.clone();
    let gs = gamma.as_slice().unwrap();
    let bs = beta.as_slice().unwrap();
    let flat = out.as_slice_mut().unwrap();
    let cf = c as f64;
    for row in flat.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / cf;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
        let inv = 1.0 / (var + eps).sqrt();
        for ci in 0..c {
            row[ci] = (row[ci] - mean) * inv * gs[ci] + bs[ci];
        }
    }
    out
}

/// Backward of [`ln_last_fwd`]; returns (gx, ggamma, gbeta).
pub(crate) fn ln_last_bwd(x: &Arr, gamma: &Arr, gout: &Arr, eps: f64) -> (Arr, Arr, Arr) {
    let c = *x.shape().last().unwrap();
    let xs = x.as_slice().unwrap();
    let gos = gout.as_slice().unwrap();
    let gs = gamma.as_slice().unwrap();
    let mut gx = Arr::zeros(x.raw_dim());
    let gxs = gx.as_slice_mut().unwrap();
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let cf = c as f64;
    for r in 0..xs.len() / c {
        let row = &xs[r * c..(r + 1) * c];
        let grow = &gos[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / cf;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
        let inv = 1.0 / (var + eps).sqrt();
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ci in 0..c {
            let xhat = (row[ci] - mean) * inv;
            let dxhat = grow[ci] * gs[ci];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            ggamma[ci] += grow[ci] * xhat;
            gbeta[ci] += grow[ci];
        }
        for ci in 0..c {
            let xhat = (row[ci] - mean) * inv;
            let dxhat = grow[ci] * gs[ci];
            gxs[r * c + ci] = inv * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf);
        }
    }
    (
        gx,
        ndarray::Array1::from_vec(ggamma).into_dyn(),
        ndarray::Array1::from_vec(gbeta).into_dyn(),
    )
}

/// Softmax over the last axis.
pub(crate) fn softmax_last_fwd(x: &Arr) -> Arr {
    let c = *x.shape().last().unwrap();
    let mut out = x.clone();
    let flat = out.as_slice_mut().unwrap();
    for row in flat.chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward of softmax given its output `y`.
pub(crate) fn softmax_last_bwd(y: &Arr, gout: &Arr) -> Arr {
    let c = *y.shape().last().unwrap();
    let ys = y.as_slice().unwrap();
    let gs = gout.as_slice().unwrap();
    let mut gx = Arr::zeros(y.raw_dim());
    let gxs = gx.as_slice_mut().unwrap();
    for r in 0..ys.len() / c {
        let yr = &ys[r * c..(r + 1) * c];
        let gr = &gs[r * c..(r + 1) * c];
        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
        for ci in 0..c {
            gxs[r * c + ci] = yr[ci] * (gr[ci] - dot);
        }
    }
    gx
}

/// Expands a relative-position bias table `(R, heads)` into per-head logits
/// `(heads, T, T)` using the pair index map (length T*T).
pub(crate) fn rpb_expand_fwd(table: &Arr, index: &[usize], t: usize) -> Arr {
    let t2 = table.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let heads = t2.dim().1;
    let mut out = Arr::zeros(IxDyn(&[heads, t, t]));
    for i in 0..t {
        for j in 0..t {
            let r = index[i * t + j];
            for h in 0..heads {
                out[[h, i, j]] = t2[[r, h]];
            }
        }
    }
    out
}

pub(crate) fn rpb_expand_bwd(gout: &Arr, index: &[usize], table_shape: &[usize]) -> Arr {
    let g3 = gout.view().into_dimensionality::<Ix3>().unwrap();
    let (heads, t, _) = g3.dim();
    let mut gt = Arr::zeros(IxDyn(table_shape));
    for i in 0..t {
        for j in 0..t {
            let r = index[i * t + j];
            for h in 0..heads {
                gt[[r, h]] += g3[[h, i, j]];
            }
        }
    }
    gt
}

/// Exact-tanh GELU used throughout:
/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const B: f64 = 0.044_715;
    0.5 * x * (1.0 + (A * (x + B * x * x * x)).tanh())
}

/// Derivative of [`gelu_scalar`] (of the tanh form itself, so finite
/// differences of the forward agree with it).
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    const A: f64 = 0.797_884_560_802_865_4;
    const B: f64 = 0.044_715;
    let u = A * (x + B * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * A * (1.0 + 3.0 * B * x * x)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
