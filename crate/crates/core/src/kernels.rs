//! Raw convolution and pooling kernels shared by the tape's forward and
//! backward rules.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn cg(&self) -> usize {
        self.c / self.groups
    }

    pub fn og(&self) -> usize {
        self.o / self.groups
    }

    /// Rows of one group's column matrix.
    pub fn kg(&self) -> usize {
        self.cg() * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Offset of channel `g * cg` of sample `n` in an NCHW input.
    fn in_offset(&self, n: usize, g: usize) -> usize {
        (n * self.c + g * self.cg()) * self.h * self.w
    }

    /// Offset of channel `g * og` of sample `n` in an NCHW output.
    fn out_offset(&self, n: usize, g: usize) -> usize {
        (n * self.o + g * self.og()) * self.out_plane()
    }
}

/// Output columns `[lo, hi)` of a stride-1 row whose tap `kj` lands inside
/// the input row.
fn valid_span(geo: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = geo.pad.saturating_sub(kj).min(geo.wo);
    let hi = (geo.w + geo.pad).saturating_sub(kj).min(geo.wo).max(lo);
    (lo, hi)
}

/// Output rows `[lo, hi)` whose tap row `ki` lands inside the input (stride 1).
fn valid_rows(geo: &ConvGeom, ki: usize) -> (usize, usize) {
    let lo = geo.pad.saturating_sub(ki).min(geo.ho);
    let hi = (geo.h + geo.pad).saturating_sub(ki).min(geo.ho).max(lo);
    (lo, hi)
}

/// Appends group `g` of sample `n`, unfolded into a `kg x (ho*wo)` matrix, to `col`.
pub(crate) fn im2col<T: Scalar>(x: &[T], geo: &ConvGeom, n: usize, g: usize, col: &mut Vec<T>) {
    let (k, wo) = (geo.k, geo.wo);
    let plane = geo.h * geo.w;
    let zeros = |col: &mut Vec<T>, m: usize| col.extend(std::iter::repeat_n(T::zero(), m));
    let base = geo.in_offset(n, g);
    col.reserve(geo.kg() * geo.out_plane());
    for ci in 0..geo.cg() {
        let src = &x[base + ci * plane..][..plane];
        for ki in 0..k {
            for kj in 0..k {
                if geo.stride == 1 {
                    let (r0, r1) = valid_rows(geo, ki);
                    let (lo, hi) = valid_span(geo, kj);
                    let off = lo + kj - geo.pad;
                    zeros(col, r0 * wo);
                    for oh in r0..r1 {
                        let ih = oh + ki - geo.pad;
                        zeros(col, lo);
                        col.extend_from_slice(&src[ih * geo.w + off..][..hi - lo]);
                        zeros(col, wo - hi);
                    }
                    zeros(col, (geo.ho - r1) * wo);
                    continue;
                }
                for oh in 0..geo.ho {
                    let ih = (oh * geo.stride + ki) as isize - geo.pad as isize;
                    if ih < 0 || ih >= geo.h as isize {
                        zeros(col, wo);
                        continue;
                    }
                    let src_row = &src[ih as usize * geo.w..][..geo.w];
                    col.extend((0..wo).map(|ow| {
                        let iw = (ow * geo.stride + kj) as isize - geo.pad as isize;
                        if iw < 0 || iw >= geo.w as isize {
                            T::zero()
                        } else {
                            src_row[iw as usize]
                        }
                    }));
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix into `dx`.
pub(crate) fn col2im_add<T: Scalar>(col: &[T], geo: &ConvGeom, n: usize, g: usize, dx: &mut [T]) {
    let (k, op, wo) = (geo.k, geo.out_plane(), geo.wo);
    let plane = geo.h * geo.w;
    let base = geo.in_offset(n, g);
    for ci in 0..geo.cg() {
        let dst = &mut dx[base + ci * plane..][..plane];
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let row = &col[r * op..(r + 1) * op];
                if geo.stride == 1 {
                    let (r0, r1) = valid_rows(geo, ki);
                    let (lo, hi) = valid_span(geo, kj);
                    let off = lo + kj - geo.pad;
                    for oh in r0..r1 {
                        let ih = oh + ki - geo.pad;
                        let d = &mut dst[ih * geo.w + off..][..hi - lo];
                        for (d, &v) in d.iter_mut().zip(&row[oh * wo + lo..oh * wo + hi]) {
                            *d = *d + v;
                        }
                    }
                    continue;
                }
                for oh in 0..geo.ho {
                    let ih = (oh * geo.stride + ki) as isize - geo.pad as isize;
                    if ih < 0 || ih >= geo.h as isize {
                        continue;
                    }
                    let src = &row[oh * wo..][..wo];
                    let dst_row = &mut dst[ih as usize * geo.w..][..geo.w];
                    for (ow, &v) in src.iter().enumerate() {
                        let iw = (ow * geo.stride + kj) as isize - geo.pad as isize;
                        if iw >= 0 && (iw as usize) < geo.w {
                            dst_row[iw as usize] = dst_row[iw as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Column matrix of group `g` of sample `n`: a view into `x` for pointwise
/// convolutions, otherwise unfolded into `buf`.
fn columns<'a, T: Scalar>(
    x: &'a [T],
    geo: &ConvGeom,
    n: usize,
    g: usize,
    buf: &'a mut Vec<T>,
) -> &'a [T] {
    if geo.is_pointwise() {
        &x[geo.in_offset(n, g)..][..geo.kg() * geo.out_plane()]
    } else {
        buf.clear();
        im2col(x, geo, n, g, buf);
        buf
    }
}

/// Forward convolution. With `keep`, also returns the unfolded columns of
/// every `(n, g)` (empty for pointwise kernels, which read `x` directly) so
/// the backward pass can skip re-unfolding.
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    geo: &ConvGeom,
    keep: bool,
) -> (Vec<T>, Vec<T>) {
    let (og, kg, op) = (geo.og(), geo.kg(), geo.out_plane());
    let mut out = Vec::with_capacity(geo.n * geo.o * op);
    for i in 0..geo.n * geo.o {
        let v = b.map_or(T::zero(), |b| b[i % geo.o]);
        out.extend(std::iter::repeat_n(v, op));
    }
    let keep = keep && !geo.is_pointwise();
    let block = kg * op;
    let mut kept = Vec::with_capacity(if keep { block * geo.n * geo.groups } else { 0 });
    let mut buf = Vec::new();
    for n in 0..geo.n {
        for g in 0..geo.groups {
            let col = if keep {
                let start = kept.len();
                im2col(x, geo, n, g, &mut kept);
                &kept[start..]
            } else {
                columns(x, geo, n, g, &mut buf)
            };
            let wg = &w[g * og * kg..(g + 1) * og * kg];
            let dst = &mut out[geo.out_offset(n, g)..][..og * op];
            T::gemm(
                og,
                kg,
                op,
                T::one(),
                wg,
                kg as isize,
                1,
                col,
                op as isize,
                1,
                T::one(),
                dst,
                op as isize,
                1,
            );
        }
    }
    (out, kept)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

/// Gradients of a convolution w.r.t. whichever of `(x, w, b)` are requested.
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    geo: &ConvGeom,
    kept: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (og, kg, op) = (geo.og(), geo.kg(), geo.out_plane());
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let db = need.2.then(|| {
        (0..geo.o)
            .map(|o| {
                (0..geo.n)
                    .map(|n| {
                        dout[(n * geo.o + o) * op..][..op]
                            .iter()
                            .copied()
                            .sum::<T>()
                    })
                    .sum()
            })
            .collect()
    });
    if dx.is_none() && dw.is_none() {
        return ConvGrads { dx, dw, db };
    }
    let mut buf = Vec::new();
    let mut dcol = vec![
        T::zero();
        if dx.is_some() && !geo.is_pointwise() {
            kg * op
        } else {
            0
        }
    ];
    for n in 0..geo.n {
        for g in 0..geo.groups {
            let dog = &dout[geo.out_offset(n, g)..][..og * op];
            if let Some(dw) = dw.as_mut() {
                let block = kg * op;
                let col = if geo.is_pointwise() {
                    columns(x, geo, n, g, &mut buf)
                } else if kept.len() == block * geo.n * geo.groups {
                    &kept[(n * geo.groups + g) * block..][..block]
                } else {
                    columns(x, geo, n, g, &mut buf)
                };
                // dW_g += dOut_ng * col^T
                T::gemm(
                    og,
                    op,
                    kg,
                    T::one(),
                    dog,
                    op as isize,
                    1,
                    col,
                    1,
                    op as isize,
                    T::one(),
                    &mut dw[g * og * kg..(g + 1) * og * kg],
                    kg as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &w[g * og * kg..(g + 1) * og * kg];
                if geo.is_pointwise() {
                    // dx_ng += W_g^T * dOut_ng, written in place.
                    let dst = &mut dx[geo.in_offset(n, g)..][..kg * op];
                    T::gemm(
                        kg,
                        og,
                        op,
                        T::one(),
                        wg,
                        1,
                        kg as isize,
                        dog,
                        op as isize,
                        1,
                        T::one(),
                        dst,
                        op as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        kg,
                        og,
                        op,
                        T::one(),
                        wg,
                        1,
                        kg as isize,
                        dog,
                        op as isize,
                        1,
                        T::zero(),
                        &mut dcol,
                        op as isize,
                        1,
                    );
                    col2im_add(&dcol, geo, n, g, dx);
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2x2/stride-2 max pooling. Returns values and the flat input index of each
/// window's maximum; ties go to the first element in row-major order.
pub(crate) fn maxpool2_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let cands = [
                    base + 2 * i * w + 2 * j,
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = cands[0];
                for &idx in &cands[1..] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}
