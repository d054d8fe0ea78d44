//! Structural similarity with an 11×11 Gaussian window (σ = 1.5) and
//! zero-padded same-size convolution, plus its gradient.

use crate::error::Result;
use crate::grid::{Grid, Image};

const RADIUS: usize = 5;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; 2 * RADIUS + 1] {
    let mut k = [0.0; 2 * RADIUS + 1];
    for (i, x) in k.iter_mut().enumerate() {
        let d = i as f64 - RADIUS as f64;
        *x = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|x| x / s)
}

/// Separable zero-padded convolution. The kernel is symmetric, so this is
/// also its own adjoint.
fn blur(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = kernel();
    let r = RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                let x = u as isize + j as isize - r;
                if x >= 0 && (x as usize) < w {
                    acc += kj * src[v * w + x as usize];
                }
            }
            tmp[v * w + u] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                let y = v as isize + j as isize - r;
                if y >= 0 && (y as usize) < h {
                    acc += kj * tmp[y as usize * w + u];
                }
            }
            out[v * w + u] = acc;
        }
    }
    out
}

struct Stats {
    mx: Vec<f64>,
    my: Vec<f64>,
    sxx: Vec<f64>,
    syy: Vec<f64>,
    sxy: Vec<f64>,
}

fn channel(img: &Image, ch: usize) -> Vec<f64> {
    img.iter().map(|p| p[ch]).collect()
}

fn stats(x: &[f64], y: &[f64], w: usize, h: usize) -> Stats {
    let mx = blur(x, w, h);
    let my = blur(y, w, h);
    let xx: Vec<f64> = x.iter().map(|a| a * a).collect();
    let yy: Vec<f64> = y.iter().map(|a| a * a).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mut sxx = blur(&xx, w, h);
    let mut syy = blur(&yy, w, h);
    let mut sxy = blur(&xy, w, h);
    for i in 0..w * h {
        sxx[i] -= mx[i] * mx[i];
        syy[i] -= my[i] * my[i];
        sxy[i] -= mx[i] * my[i];
    }
    Stats { mx, my, sxx, syy, sxy }
}

#[inline]
fn ssim_at(s: &Stats, i: usize) -> f64 {
    let n1 = 2.0 * s.mx[i] * s.my[i] + C1;
    let n2 = 2.0 * s.sxy[i] + C2;
    let d1 = s.mx[i] * s.mx[i] + s.my[i] * s.my[i] + C1;
    let d2 = s.sxx[i] + s.syy[i] + C2;
    n1 * n2 / (d1 * d2)
}

/// Per-pixel SSIM averaged over the three channels.
pub fn ssim_map(x: &Image, y: &Image) -> Result<Grid<f64>> {
    x.same_shape(y)?;
    let (w, h) = x.shape();
    let mut out = vec![0.0; w * h];
    for ch in 0..3 {
        let s = stats(&channel(x, ch), &channel(y, ch), w, h);
        for (i, o) in out.iter_mut().enumerate() {
            *o += ssim_at(&s, i) / 3.0;
        }
    }
    Grid::from_vec(w, h, out)
}

/// Mean SSIM over pixels and channels.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    let m = ssim_map(x, y)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// Value and gradient with respect to `x` of `Σ_p weight(p)·ssim_map(p)`.
pub fn weighted_ssim_grad(x: &Image, y: &Image, weight: &Grid<f64>) -> Result<(f64, Image)> {
    x.same_shape(y)?;
    x.same_shape(weight)?;
    let (w, h) = x.shape();
    let n = w * h;
    let mut grad = Grid::filled(w, h, [0.0; 3]);
    let mut value = 0.0;
    for ch in 0..3 {
        let (xc, yc) = (channel(x, ch), channel(y, ch));
        let s = stats(&xc, &yc, w, h);
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        let mut c = vec![0.0; n];
        for i in 0..n {
            let wt = weight[i] / 3.0;
            let n1 = 2.0 * s.mx[i] * s.my[i] + C1;
            let n2 = 2.0 * s.sxy[i] + C2;
            let d1 = s.mx[i] * s.mx[i] + s.my[i] * s.my[i] + C1;
            let d2 = s.sxx[i] + s.syy[i] + C2;
            let den = d1 * d2;
            let f = n1 * n2 / den;
            value += wt * f;
            a[i] = wt * (2.0 * s.my[i] * n2 - f * 2.0 * s.mx[i] * d2) / den;
            b[i] = wt * (-f / d2);
            c[i] = wt * (2.0 * n1 / den);
        }
        let ga = blur(&a, w, h);
        let gb = blur(&b, w, h);
        let bm: Vec<f64> = (0..n).map(|i| b[i] * s.mx[i]).collect();
        let gbm = blur(&bm, w, h);
        let gc = blur(&c, w, h);
        let cm: Vec<f64> = (0..n).map(|i| c[i] * s.my[i]).collect();
        let gcm = blur(&cm, w, h);
        for i in 0..n {
            grad[i][ch] = ga[i] + 2.0 * xc[i] * gb[i] - 2.0 * gbm[i] + yc[i] * gc[i] - gcm[i];
        }
    }
    Ok((value, grad))
}
