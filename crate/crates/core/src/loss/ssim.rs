//! Mean structural similarity over valid 11×11 Gaussian windows.

use crate::error::{Error, Result};
use crate::image::Image;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 1e-4;
pub const C2: f64 = 9e-4;

/// Normalized 1D Gaussian taps of odd length `size`.
pub fn gaussian_window(size: usize) -> Vec<f64> {
    let mut w = vec![0.0; size];
    let c = (size / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Largest odd window no bigger than [`WINDOW`] that fits a `w × h` image.
pub fn fitting_window(w: usize, h: usize) -> usize {
    let m = WINDOW.min(w).min(h).max(1);
    if m % 2 == 0 { m - 1 } else { m }
}

/// Separable valid-mode filtering of one plane.
fn filter(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter`].
fn filter_adjoint(g: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for i in 0..n {
                tmp[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..n {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

fn planes(img: &Image) -> Vec<Vec<f64>> {
    (0..img.channels).map(|c| img.data.iter().skip(c).step_by(img.channels).copied().collect()).collect()
}

fn check(a: &Image, b: &Image, window: usize) -> Result<()> {
    a.check_same_shape(b)?;
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("SSIM window must be odd and positive, got {window}")));
    }
    if a.width < window || a.height < window {
        return Err(Error::Dimension(format!("SSIM needs images of at least {window}x{window}, got {}x{}", a.width, a.height)));
    }
    Ok(())
}

/// Mean SSIM with the default 11-tap window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_window(a, b, WINDOW)
}

pub fn ssim_window(a: &Image, b: &Image, window: usize) -> Result<f64> {
    Ok(ssim_impl(a, b, window, false)?.0)
}

/// SSIM and its gradient with respect to `b`.
pub fn ssim_grad(a: &Image, b: &Image, window: usize) -> Result<(f64, Image)> {
    let (v, g) = ssim_impl(a, b, window, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn ssim_impl(a: &Image, b: &Image, window: usize, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check(a, b, window)?;
    let (w, h, ch) = (a.width, a.height, a.channels);
    let k = gaussian_window(window);
    let count = ((w + 1 - window) * (h + 1 - window) * ch) as f64;
    let (pa, pb) = (planes(a), planes(b));
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, ch));
    for c in 0..ch {
        let (x, y) = (&pa[c], &pb[c]);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter(x, w, h, &k), filter(y, w, h, &k));
        let (exx, eyy, exy) = (filter(&xx, w, h, &k), filter(&yy, w, h, &k), filter(&xy, w, h, &k));
        let n = mx.len();
        let mut g_my = vec![0.0; n];
        let mut g_eyy = vec![0.0; n];
        let mut g_exy = vec![0.0; n];
        for i in 0..n {
            let (ma, mb) = (mx[i], my[i]);
            let va = exx[i] - ma * ma;
            let vb = eyy[i] - mb * mb;
            let cov = exy[i] - ma * mb;
            let a1 = 2.0 * ma * mb + C1;
            let a2 = 2.0 * cov + C2;
            let b1 = ma * ma + mb * mb + C1;
            let b2 = va + vb + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let scale = s / count;
                g_my[i] = scale * (2.0 * ma / a1 - 2.0 * ma / a2 - 2.0 * mb / b1 + 2.0 * mb / b2);
                g_eyy[i] = scale * (-1.0 / b2);
                g_exy[i] = scale * (2.0 / a2);
            }
        }
        if let Some(g) = grad.as_mut() {
            let d_my = filter_adjoint(&g_my, w, h, &k);
            let d_eyy = filter_adjoint(&g_eyy, w, h, &k);
            let d_exy = filter_adjoint(&g_exy, w, h, &k);
            for p in 0..w * h {
                g.data[p * ch + c] = d_my[p] + 2.0 * y[p] * d_eyy[p] + x[p] * d_exy[p];
            }
        }
    }
    Ok((total / count, grad))
}
