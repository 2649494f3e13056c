//! Same-padded 2-D convolution over `H x W x C` maps and its adjoint, the
//! transposed convolution, both lowered to im2col plus a GEMM.
//!
//! Convolution kernels are `k x k x C_in x C_out`. Transposed-convolution
//! kernels use the layout of the convolution they are the adjoint of:
//! `k x k x C_out x C_in`, where `C_out` is the channel count of the
//! (larger) output map.

use super::array::Array;
use crate::error::{Error, Result};

/// Spatial bookkeeping for a same-padded convolution of an `in_h x in_w` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Output is `ceil(in / stride)`; the total pad `max((out-1)*stride + k - in, 0)`
/// is split with the extra row/column at the bottom/right.
pub fn same_geometry(in_h: usize, in_w: usize, k: usize, stride: usize) -> ConvGeometry {
    let out_h = in_h.div_ceil(stride);
    let out_w = in_w.div_ceil(stride);
    let pad = |inp: usize, out: usize| ((out - 1) * stride + k).saturating_sub(inp) / 2;
    ConvGeometry {
        in_h,
        in_w,
        out_h,
        out_w,
        k,
        stride,
        pad_top: pad(in_h, out_h),
        pad_left: pad(in_w, out_w),
    }
}

/// Output sizes a transposed convolution with `stride` can reach from `input`.
pub fn deconv_targets(input: usize, stride: usize) -> std::ops::RangeInclusive<usize> {
    (stride * input.saturating_sub(1) + 1)..=(stride * input)
}

impl ConvGeometry {
    fn patches(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`, if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.in_h && ix < self.in_w).then_some((iy, ix))
    }
}

fn im2col(x: &[f64], geo: &ConvGeometry, c: usize) -> Vec<f64> {
    let row = geo.k * geo.k * c;
    let mut cols = vec![0.0; geo.patches() * row];
    for oy in 0..geo.out_h {
        for ox in 0..geo.out_w {
            let base = (oy * geo.out_w + ox) * row;
            for ky in 0..geo.k {
                for kx in 0..geo.k {
                    if let Some((iy, ix)) = geo.source(oy, ox, ky, kx) {
                        let dst = base + (ky * geo.k + kx) * c;
                        let src = (iy * geo.in_w + ix) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], geo: &ConvGeometry, c: usize) -> Vec<f64> {
    let row = geo.k * geo.k * c;
    let mut x = vec![0.0; geo.in_h * geo.in_w * c];
    for oy in 0..geo.out_h {
        for ox in 0..geo.out_w {
            let base = (oy * geo.out_w + ox) * row;
            for ky in 0..geo.k {
                for kx in 0..geo.k {
                    if let Some((iy, ix)) = geo.source(oy, ox, ky, kx) {
                        let src = base + (ky * geo.k + kx) * c;
                        let dst = (iy * geo.in_w + ix) * c;
                        for (d, s) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `C = A * B` with optional transposition of the stored operands.
/// `A` is logically `m x k`, `B` is `k x n`, `C` is `m x n` row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements of the slices, whose lengths are asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn kernel_dims(w: &Array) -> Result<(usize, usize, usize)> {
    match w.shape()[..] {
        [k, k2, ci, co] if k == k2 && k > 0 => Ok((k, ci, co)),
        _ => Err(Error::Shape(format!(
            "kernel must be k x k x C_in x C_out, got {:?}",
            w.shape()
        ))),
    }
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::Shape("stride must be at least 1".into()));
    }
    Ok(())
}

pub fn conv2d(x: &Array, w: &Array, stride: usize) -> Result<Array> {
    check_stride(stride)?;
    let (h, wd, c) = x.hwc()?;
    let (k, ci, co) = kernel_dims(w)?;
    if ci != c {
        return Err(Error::Shape(format!(
            "conv2d: input has {c} channels, kernel expects {ci}"
        )));
    }
    let geo = same_geometry(h, wd, k, stride);
    let mut out = vec![0.0; geo.patches() * co];
    if k == 1 && stride == 1 {
        gemm(
            geo.patches(),
            c,
            co,
            x.data(),
            false,
            w.data(),
            false,
            &mut out,
        );
    } else {
        let cols = im2col(x.data(), &geo, c);
        gemm(
            geo.patches(),
            k * k * c,
            co,
            &cols,
            false,
            w.data(),
            false,
            &mut out,
        );
    }
    Array::from_vec(vec![geo.out_h, geo.out_w, co], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward(
    x: &Array,
    w: &Array,
    stride: usize,
    dout: &Array,
) -> Result<(Array, Array)> {
    let (h, wd, c) = x.hwc()?;
    let (k, _, co) = kernel_dims(w)?;
    let geo = same_geometry(h, wd, k, stride);
    let patches = geo.patches();
    let kkc = k * k * c;
    let cols = im2col(x.data(), &geo, c);
    let mut dw = vec![0.0; kkc * co];
    gemm(kkc, patches, co, &cols, true, dout.data(), false, &mut dw);
    let mut dcols = vec![0.0; patches * kkc];
    gemm(
        patches,
        co,
        kkc,
        dout.data(),
        false,
        w.data(),
        true,
        &mut dcols,
    );
    let dx = col2im(&dcols, &geo, c);
    Ok((
        Array::from_vec(vec![h, wd, c], dx)?,
        Array::from_vec(w.shape().to_vec(), dw)?,
    ))
}

/// Transposed convolution: the adjoint of a same-padded [`conv2d`] from a
/// `target` sized map down to `y`'s spatial size.
pub fn deconv2d(y: &Array, w: &Array, stride: usize, target: (usize, usize)) -> Result<Array> {
    check_stride(stride)?;
    let (hy, wy, cy) = y.hwc()?;
    let (k, cx, ci) = kernel_dims(w)?;
    if ci != cy {
        return Err(Error::Shape(format!(
            "deconv2d: input has {cy} channels, kernel expects {ci}"
        )));
    }
    let geo = deconv_geometry(hy, wy, k, stride, target)?;
    let kkc = k * k * cx;
    let mut dcols = vec![0.0; geo.patches() * kkc];
    gemm(
        geo.patches(),
        cy,
        kkc,
        y.data(),
        false,
        w.data(),
        true,
        &mut dcols,
    );
    let out = col2im(&dcols, &geo, cx);
    Array::from_vec(vec![target.0, target.1, cx], out)
}

/// Gradients of [`deconv2d`] with respect to its input and kernel.
pub fn deconv2d_backward(
    y: &Array,
    w: &Array,
    stride: usize,
    dout: &Array,
) -> Result<(Array, Array)> {
    let (hy, wy, cy) = y.hwc()?;
    let (k, cx, _) = kernel_dims(w)?;
    let (th, tw, _) = dout.hwc()?;
    let geo = deconv_geometry(hy, wy, k, stride, (th, tw))?;
    let patches = geo.patches();
    let kkc = k * k * cx;
    let cols = im2col(dout.data(), &geo, cx);
    let mut dy = vec![0.0; patches * cy];
    gemm(patches, kkc, cy, &cols, false, w.data(), false, &mut dy);
    let mut dw = vec![0.0; kkc * cy];
    gemm(kkc, patches, cy, &cols, true, y.data(), false, &mut dw);
    Ok((
        Array::from_vec(vec![hy, wy, cy], dy)?,
        Array::from_vec(w.shape().to_vec(), dw)?,
    ))
}

fn deconv_geometry(
    hy: usize,
    wy: usize,
    k: usize,
    stride: usize,
    (th, tw): (usize, usize),
) -> Result<ConvGeometry> {
    let geo = same_geometry(th, tw, k, stride);
    if geo.out_h != hy || geo.out_w != wy || th == 0 || tw == 0 {
        let rh = deconv_targets(hy, stride);
        let rw = deconv_targets(wy, stride);
        return Err(Error::Shape(format!(
            "deconv2d: target {th}x{tw} unreachable from {hy}x{wy} with stride {stride}; \
             achievable heights {}..={}, widths {}..={}",
            rh.start(),
            rh.end(),
            rw.start(),
            rw.end()
        )));
    }
    Ok(geo)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::rng::seeded;

    fn random(shape: &[usize], seed: u64) -> Array {
        let mut rng = seeded(seed);
        Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct six-loop convolution with the same padding rule.
    fn naive_conv(x: &Array, w: &Array, stride: usize) -> Array {
        let (h, wd, c) = x.hwc().unwrap();
        let (k, co) = (w.shape()[0], w.shape()[3]);
        let oh = h.div_ceil(stride);
        let ow = wd.div_ceil(stride);
        let pt = (((oh - 1) * stride + k).saturating_sub(h)) / 2;
        let pl = (((ow - 1) * stride + k).saturating_sub(wd)) / 2;
        let mut out = Array::zeros(&[oh, ow, co]);
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for i in 0..c {
                                let xv = x.data()[(iy as usize * wd + ix as usize) * c + i];
                                let wv = w.data()[((ky * k + kx) * c + i) * co + o];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[(oy * ow + ox) * co + o] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let x = random(&[5, 6, 2], 1);
        let mut w = Array::zeros(&[1, 1, 2, 2]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        assert_eq!(conv2d(&x, &w, 1).unwrap(), x);
        assert_eq!(deconv2d(&x, &w, 1, (5, 6)).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_overlaps() {
        let x = Array::full(&[5, 5, 1], 1.0);
        let w = Array::full(&[3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &w, 1).unwrap();
        assert_eq!(y.shape(), [5, 5, 1]);
        assert_eq!(y.data()[2 * 5 + 2], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[24], 4.0);
        assert_eq!(y.data()[2], 6.0);
    }

    #[test]
    fn matches_naive_reference() {
        let x = random(&[8, 8, 2], 2);
        let w = random(&[3, 3, 2, 4], 3);
        let fast = conv2d(&x, &w, 2).unwrap();
        let slow = naive_conv(&x, &w, 2);
        assert_eq!(fast.shape(), [4, 4, 4]);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        for (h, k, s) in [
            (30, 3, 1),
            (30, 3, 2),
            (15, 2, 2),
            (8, 2, 2),
            (7, 2, 1),
            (1, 2, 2),
        ] {
            let x = random(&[h, h, 3], h as u64);
            let w = random(&[k, k, 3, 2], k as u64);
            let fast = conv2d(&x, &w, s).unwrap();
            let slow = naive_conv(&x, &w, s);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn encoder_schedule_sizes() {
        let mut n = 30;
        let mut sizes = vec![];
        for (k, s) in [(3, 1), (3, 2), (2, 2), (2, 2)] {
            n = same_geometry(n, n, k, s).out_h;
            sizes.push(n);
        }
        assert_eq!(sizes, [30, 15, 8, 4]);
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        let cases = [
            (30, 3, 1, 3, 4),
            (30, 3, 2, 4, 3),
            (15, 2, 2, 3, 5),
            (8, 2, 2, 2, 3),
            (10, 3, 2, 2, 2),
            (3, 2, 2, 4, 2),
        ];
        for (i, &(h, k, s, cx, cy)) in cases.iter().enumerate() {
            let x = random(&[h, h, cx], 10 + i as u64);
            let w = random(&[k, k, cx, cy], 20 + i as u64);
            let cx_out = conv2d(&x, &w, s).unwrap();
            let y = random(cx_out.shape(), 30 + i as u64);
            let lhs = cx_out.dot(&y);
            let rhs = x.dot(&deconv2d(&y, &w, s, (h, h)).unwrap());
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0),
                "{lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn deconv_mirror_of_encoder() {
        let y = random(&[4, 4, 3], 4);
        let w = random(&[2, 2, 2, 3], 5);
        let up = deconv2d(&y, &w, 2, (8, 8)).unwrap();
        assert_eq!(up.shape(), [8, 8, 2]);
        let w2 = random(&[2, 2, 1, 2], 6);
        let up2 = deconv2d(&up, &w2, 2, (15, 15)).unwrap();
        assert_eq!(up2.shape(), [15, 15, 1]);
        let err = deconv2d(&up, &w2, 2, (17, 17)).unwrap_err().to_string();
        assert!(err.contains("15..=16"), "{err}");
    }

    #[test]
    fn backward_matches_adjoint_identities() {
        // <dout, conv(x)> is linear in x and in w, so its gradients are
        // conv's adjoints: check them with directional finite differences.
        let x = random(&[6, 6, 2], 40);
        let w = random(&[3, 3, 2, 3], 41);
        let dout = random(&[3, 3, 3], 42);
        let (dx, dw) = conv2d_backward(&x, &w, 2, &dout).unwrap();
        let dir_x = random(&[6, 6, 2], 43);
        let dir_w = random(&[3, 3, 2, 3], 44);
        let f = |x: &Array, w: &Array| conv2d(x, w, 2).unwrap().dot(&dout);
        let eps = 1e-6;
        let shift = |a: &Array, d: &Array, e: f64| a.zip_map(d, |p, q| p + e * q);
        let fd_x = (f(&shift(&x, &dir_x, eps), &w) - f(&shift(&x, &dir_x, -eps), &w)) / (2.0 * eps);
        let fd_w = (f(&x, &shift(&w, &dir_w, eps)) - f(&x, &shift(&w, &dir_w, -eps))) / (2.0 * eps);
        assert!((fd_x - dx.dot(&dir_x)).abs() < 1e-7);
        assert!((fd_w - dw.dot(&dir_w)).abs() < 1e-7);

        let y = random(&[3, 3, 3], 45);
        let dout = random(&[6, 6, 2], 46);
        let (dy, dw) = deconv2d_backward(&y, &w, 2, &dout).unwrap();
        let g = |y: &Array, w: &Array| deconv2d(y, w, 2, (6, 6)).unwrap().dot(&dout);
        let dir_y = random(&[3, 3, 3], 47);
        let fd_y = (g(&shift(&y, &dir_y, eps), &w) - g(&shift(&y, &dir_y, -eps), &w)) / (2.0 * eps);
        let fd_w = (g(&y, &shift(&w, &dir_w, eps)) - g(&y, &shift(&w, &dir_w, -eps))) / (2.0 * eps);
        assert!((fd_y - dy.dot(&dir_y)).abs() < 1e-7);
        assert!((fd_w - dw.dot(&dir_w)).abs() < 1e-7);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = random(&[4, 4, 2], 1);
        let w = random(&[3, 3, 3, 1], 2);
        assert!(matches!(conv2d(&x, &w, 1), Err(Error::Shape(_))));
        assert!(conv2d(&x, &random(&[3, 3, 2, 1], 3), 0).is_err());
    }
}
