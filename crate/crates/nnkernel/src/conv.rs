//! 2-D cross-correlation via im2col + GEMM.
//!
//! Kernels are `[out_channels, in_channels, k, k]` with odd or even `k`;
//! `Padding::Same` pads by `(k - 1) / 2` on every side.

use crate::error::{shape_err, NnError, Result};
use crate::gemm::{gemm, MatRef};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn new(x: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Self> {
        let (c_in, h, w) = x.dims3()?;
        let [c_out, kc, kh, kw] = kernel.shape() else {
            return shape_err(format!("kernel must be 4-D, got {:?}", kernel.shape()));
        };
        let (c_out, kc, kh, kw) = (*c_out, *kc, *kh, *kw);
        if kc != c_in {
            return shape_err(format!("kernel expects {kc} input channels, input has {c_in}"));
        }
        if kh != kw || kh == 0 {
            return shape_err(format!("kernel must be square, got {kh}×{kw}"));
        }
        if !(1..=2).contains(&stride) {
            return Err(NnError::Argument(format!("stride must be 1 or 2, got {stride}")));
        }
        let pad = match padding {
            Padding::Same => (kh - 1) / 2,
            Padding::Valid => 0,
        };
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err(format!("input {h}×{w} smaller than kernel {kh}×{kw}"));
        }
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        Ok(Geometry {
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    /// For output coordinate `o` and kernel tap `t`, the input coordinate, if
    /// inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, n: usize) -> Option<usize> {
        let s = (o * self.stride + t) as isize - self.pad as isize;
        (s >= 0 && (s as usize) < n).then_some(s as usize)
    }
}

fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let p = g.out_pixels();
    let mut col = vec![0.0; g.patch_len() * p];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if g.stride == 1 {
                        // Contiguous run of valid columns.
                        let lo = g.pad.saturating_sub(kx);
                        let hi = (g.w + g.pad - kx).min(g.w_out);
                        if lo < hi {
                            let s0 = lo + kx - g.pad;
                            dst_row[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                *d = src_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], g: &Geometry) -> Vec<f64> {
    let p = g.out_pixels();
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src_row = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, v) in src_row.iter().enumerate() {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            dst_row[ix] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation of a C×H×W input with `kernel`, plus an optional
/// per-output-channel bias.
pub fn conv2d(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let g = Geometry::new(x, kernel, stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return shape_err(format!("bias has {} entries, need {}", b.len(), g.c_out));
        }
    }
    let p = g.out_pixels();
    let mut out = vec![0.0; g.c_out * p];
    if let Some(b) = bias {
        for (co, &bv) in b.data().iter().enumerate() {
            out[co * p..(co + 1) * p].fill(bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.k == 1 && g.stride == 1 {
        gemm(
            MatRef::new(kernel.data(), g.c_out, g.c_in),
            MatRef::new(x.data(), g.c_in, p),
            &mut out,
            beta,
        );
    } else {
        let col = im2col(x.data(), &g);
        gemm(
            MatRef::new(kernel.data(), g.c_out, g.patch_len()),
            MatRef::new(&col, g.patch_len(), p),
            &mut out,
            beta,
        );
    }
    Tensor::from_vec(&[g.c_out, g.h_out, g.w_out], out)
}

/// Gradients of a [`conv2d`] call.
#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Backward pass of [`conv2d`] given the upstream gradient `grad_out`.
///
/// Set `want_input` to false for layers whose input is data (the image), which
/// skips one of the two GEMMs.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<Conv2dGrads> {
    let g = Geometry::new(x, kernel, stride, padding)?;
    let (gc, gh, gw) = grad_out.dims3()?;
    if (gc, gh, gw) != (g.c_out, g.h_out, g.w_out) {
        return shape_err(format!(
            "grad_out {:?} does not match conv output {}×{}×{}",
            grad_out.shape(),
            g.c_out,
            g.h_out,
            g.w_out
        ));
    }
    let p = g.out_pixels();
    let go = grad_out.data();
    let bias: Vec<f64> = (0..g.c_out)
        .map(|co| go[co * p..(co + 1) * p].iter().sum())
        .collect();

    let pointwise = g.k == 1 && g.stride == 1;
    let col_storage;
    let col: &[f64] = if pointwise {
        x.data()
    } else {
        col_storage = im2col(x.data(), &g);
        &col_storage
    };

    let mut gw_data = vec![0.0; g.c_out * g.patch_len()];
    gemm(
        MatRef::new(go, g.c_out, p),
        MatRef::new(col, g.patch_len(), p).t(),
        &mut gw_data,
        0.0,
    );

    let input = if want_input {
        let mut gcol = vec![0.0; g.patch_len() * p];
        gemm(
            MatRef::new(kernel.data(), g.c_out, g.patch_len()).t(),
            MatRef::new(go, g.c_out, p),
            &mut gcol,
            0.0,
        );
        let gx = if pointwise { gcol } else { col2im(&gcol, &g) };
        Some(Tensor::from_vec(&[g.c_in, g.h, g.w], gx)?)
    } else {
        None
    };

    Ok(Conv2dGrads {
        input,
        weight: Tensor::from_vec(kernel.shape(), gw_data)?,
        bias: Tensor::from_vec(&[g.c_out], bias)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct quadruple loop, used as the reference.
    fn naive(x: &Tensor, k: &Tensor, b: Option<&Tensor>, stride: usize, pad: Padding) -> Tensor {
        let (ci, h, w) = x.dims3().unwrap();
        let (co, kk) = (k.shape()[0], k.shape()[2]);
        let p = if pad == Padding::Same { (kk - 1) / 2 } else { 0 };
        let ho = (h + 2 * p - kk) / stride + 1;
        let wo = (w + 2 * p - kk) / stride + 1;
        let mut out = Tensor::zeros(&[co, ho, wo]);
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for ky in 0..kk {
                            for kx in 0..kk {
                                let iy = (oy * stride + ky) as isize - p as isize;
                                let ix = (ox * stride + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += k.data()[((o * ci + c) * kk + ky) * kk + kx]
                                    * x.data()[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out.data_mut()[(o * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn identity_kernel_same_padding_is_identity() {
        let x = Tensor::from_vec(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let y = conv2d(&x, &k, None, 1, Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_valid_sums_nine() {
        let x = Tensor::filled(&[1, 4, 4], 1.0);
        let k = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, None, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn matches_naive_loop() {
        for (stride, pad, k, h, w) in [
            (1, Padding::Same, 3, 7, 6),
            (2, Padding::Same, 3, 8, 8),
            (2, Padding::Same, 3, 7, 5),
            (1, Padding::Valid, 3, 5, 6),
            (2, Padding::Valid, 3, 9, 7),
            (1, Padding::Same, 1, 4, 4),
            (1, Padding::Same, 5, 6, 6),
        ] {
            let x = pseudo(&[3, h, w], 1);
            let kern = pseudo(&[4, 3, k, k], 2);
            let b = pseudo(&[4], 3);
            let got = conv2d(&x, &kern, Some(&b), stride, pad).unwrap();
            let want = naive(&x, &kern, Some(&b), stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn stride_two_halves_even_inputs() {
        let x = Tensor::zeros(&[2, 224, 224]);
        let k = Tensor::zeros(&[5, 2, 3, 3]);
        let y = conv2d(&x, &k, None, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[5, 112, 112]);
    }

    #[test]
    fn rejects_channel_mismatch_and_bad_stride() {
        let x = Tensor::zeros(&[2, 5, 5]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), None, 1, Padding::Same).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), None, 3, Padding::Same).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), Some(&Tensor::zeros(&[2])), 1, Padding::Same).is_err());
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), r> = <x, conv^T(r)> and likewise for the kernel.
        for (stride, pad) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
            let x = pseudo(&[2, 6, 6], 4);
            let k = pseudo(&[3, 2, 3, 3], 5);
            let y = conv2d(&x, &k, None, stride, pad).unwrap();
            let r = pseudo(y.shape(), 6);
            let g = conv2d_backward(&x, &k, stride, pad, &r, true).unwrap();
            let lhs: f64 = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
            let via_x: f64 = x
                .data()
                .iter()
                .zip(g.input.as_ref().unwrap().data())
                .map(|(a, b)| a * b)
                .sum();
            let via_k: f64 = k.data().iter().zip(g.weight.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10);
            assert!((lhs - via_k).abs() < 1e-10);
        }
    }
}
