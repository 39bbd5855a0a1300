//! Spatial resizing (2×2 max-pool, 2× bilinear upsampling) and channel
//! concatenation.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// 2×2 max-pool with stride 2. Spatial dims must be even.
pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("maxpool2 needs even spatial dims, got {h}×{w}"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i = base + 2 * oy * w + 2 * ox;
                let m = xd[i].max(xd[i + 1]).max(xd[i + w]).max(xd[i + w + 1]);
                out[(ch * ho + oy) * wo + ox] = m;
            }
        }
    }
    Tensor::from_vec(&[c, ho, wo], out)
}

/// Routes each pooled gradient to the first maximal element of its window
/// (row-major order), matching the forward's tie behaviour.
pub fn maxpool2_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (ho, wo) = (h / 2, w / 2);
    if grad_out.dims3()? != (c, ho, wo) {
        return shape_err(format!(
            "maxpool2 grad {:?} vs input {:?}",
            grad_out.shape(),
            x.shape()
        ));
    }
    let xd = x.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i = base + 2 * oy * w + 2 * ox;
                let mut best = i;
                for j in [i + 1, i + w, i + w + 1] {
                    if xd[j] > xd[best] {
                        best = j;
                    }
                }
                gx[best] += go[(ch * ho + oy) * wo + ox];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], gx)
}

/// Source taps for one output coordinate of a 2× half-pixel-centred
/// (align-corners = false) upsample: `(i0, i1, weight of i1)`.
fn up2_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear 2× upsample with align-corners = false sampling.
pub fn bilinear_up2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h == 0 || w == 0 {
        return shape_err("bilinear_up2 of empty tensor");
    }
    let ty = up2_taps(h);
    let tx = up2_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let plane = &xd[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * ho + oy) * wo + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::from_vec(&[c, ho, wo], out)
}

/// Transpose of [`bilinear_up2`] (it is linear, so this is its gradient).
pub fn bilinear_up2_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (c, ho, wo) = grad_out.dims3()?;
    if ho % 2 != 0 || wo % 2 != 0 {
        return shape_err(format!("bilinear_up2 grad must have even dims, got {ho}×{wo}"));
    }
    let (h, w) = (ho / 2, wo / 2);
    let ty = up2_taps(h);
    let tx = up2_taps(w);
    let go = grad_out.data();
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = go[(ch * ho + oy) * wo + ox];
                plane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += g * (1.0 - fy) * fx;
                plane[y1 * w + x0] += g * fy * (1.0 - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], gx)
}

/// Stacks C_i×H×W tensors along the channel axis, in argument order.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = xs.first() else {
        return shape_err("concat of zero tensors");
    };
    let (_, h, w) = first.dims3()?;
    let mut c_total = 0;
    for x in xs {
        let (c, hh, ww) = x.dims3()?;
        if (hh, ww) != (h, w) {
            return shape_err(format!("concat spatial mismatch {hh}×{ww} vs {h}×{w}"));
        }
        c_total += c;
    }
    let mut data = Vec::with_capacity(c_total * h * w);
    for x in xs {
        data.extend_from_slice(x.data());
    }
    Tensor::from_vec(&[c_total, h, w], data)
}

/// Inverse of [`concat_channels`]: splits a gradient into per-input pieces.
pub fn split_channels(x: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (c, h, w) = x.dims3()?;
    if channels.iter().sum::<usize>() != c {
        return shape_err(format!("split {channels:?} does not sum to {c}"));
    }
    let mut out = Vec::with_capacity(channels.len());
    let mut off = 0;
    for &ci in channels {
        let n = ci * h * w;
        out.push(Tensor::from_vec(&[ci, h, w], x.data()[off..off + n].to_vec())?);
        off += n;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_max() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2_backward(&x, &Tensor::filled(&[1, 1, 1], 2.5)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 2.5]);
    }

    #[test]
    fn maxpool_rejects_odd() {
        assert!(maxpool2(&Tensor::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = Tensor::filled(&[2, 3, 5], 0.7);
        let y = bilinear_up2(&x).unwrap();
        assert_eq!(y.shape(), &[2, 6, 10]);
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn bilinear_half_pixel_weights() {
        // 1-D row [0, 4] upsampled: sources at -0.25 (clamped 0), 0.25, 0.75, 1.25 (→ clamp 1).
        let x = Tensor::from_vec(&[1, 1, 2], vec![0.0, 4.0]).unwrap();
        let y = bilinear_up2(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 3.0, 4.0, 0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin());
        let y = bilinear_up2(&x).unwrap();
        let r = Tensor::from_fn(y.shape(), |i| (i as f64 * 0.91).cos());
        let g = bilinear_up2_backward(&r).unwrap();
        let lhs: f64 = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_and_split_roundtrip() {
        let a = Tensor::filled(&[2, 3, 3], 1.0);
        let b = Tensor::filled(&[1, 3, 3], 2.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 3, 3]);
        assert_eq!(c.channel(2), &[2.0; 9]);
        let parts = split_channels(&c, &[2, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert!(concat_channels(&[&a, &Tensor::zeros(&[1, 2, 3])]).is_err());
    }
}
