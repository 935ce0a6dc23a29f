//! PSNR and SSIM, plus a differentiable `1 - SSIM` built from tape ops.
//!
//! SSIM uses an 11×11 Gaussian window (std 1.5), "valid" placement only,
//! constants `C1 = (0.01 peak)^2`, `C2 = (0.03 peak)^2`, and compares the
//! channel-averaged luminance of colour images.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 120.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// `10 log10(peak^2 / MSE)`; identical inputs give [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - mid).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((h, w, c)),
        [1, h, w, c] => Ok((h, w, c)),
        _ => Err(Error::Image(format!("expected [H, W, ch], got {shape:?}"))),
    }
}

fn luminance<T: Scalar>(img: &Tensor<T>, h: usize, w: usize, c: usize) -> Vec<f64> {
    (0..h * w)
        .map(|p| img.data()[p * c..(p + 1) * c].iter().map(|v| v.as_f64()).sum::<f64>() / c as f64)
        .collect()
}

/// Mean local SSIM of two `[H, W, ch]` images with the given peak value.
pub fn ssim_with_peak<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let (h, w, c) = image_dims(a.shape())?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Image(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let (x, y) = (luminance(a, h, w, c), luminance(b, h, w, c));
    let g = gaussian_taps();
    let (c1, c2) = ((K1 * peak).powi(2), (K2 * peak).powi(2));
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..SSIM_WINDOW {
                for v in 0..SSIM_WINDOW {
                    let k = g[u] * g[v];
                    let p = (i + u) * w + j + v;
                    let (xv, yv) = (x[p], y[p]);
                    mx += k * xv;
                    my += k * yv;
                    sxx += k * xv * xv;
                    syy += k * yv * yv;
                    sxy += k * xv * yv;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// SSIM for images in `[0, 1]`.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    ssim_with_peak(a, b, 1.0)
}

/// Banded `[n - 10, n]` matrix whose rows are shifted Gaussian taps.
fn band_matrix<T: Scalar>(n: usize) -> Tensor<T> {
    let g = gaussian_taps();
    let rows = n - SSIM_WINDOW + 1;
    let mut data = vec![T::zero(); rows * n];
    for r in 0..rows {
        for (u, &tap) in g.iter().enumerate() {
            data[r * n + r + u] = T::from_f64(tap);
        }
    }
    Tensor::new(vec![rows, n], data).expect("band shape")
}

/// `1 - mean SSIM` over a batch `[B, H, W, ch]`, differentiable in `pred`.
pub fn ssim_loss<'t, T: Scalar>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = pred.shape();
    if shape != target.shape() {
        return Err(Error::shape("ssim_loss", &shape, &target.shape()));
    }
    let &[b, h, w, c] = shape.as_slice() else {
        return Err(Error::shape("ssim_loss", &shape, &[0, 0, 0, 0]));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Image(format!("{h}x{w} image is smaller than the SSIM window")));
    }
    let tape: &'t Tape<T> = pred.tape();
    let lum = |v: Var<'t, T>| -> Result<Var<'t, T>> {
        let v = if c == 1 {
            v
        } else {
            v.matmul(&tape.constant(&Tensor::full(&[c, 1], T::from_f64(1.0 / c as f64))))?
        };
        v.reshape(&[b, h, w])
    };
    let gh = tape.constant(&band_matrix::<T>(h));
    let gw = tape.constant(&band_matrix::<T>(w));
    let filt = |v: Var<'t, T>| -> Result<Var<'t, T>> { gh.matmul(&v)?.matmul_nt(&gw) };
    let (x, y) = (lum(pred)?, lum(target)?);
    let (mx, my) = (filt(x)?, filt(y)?);
    let (mxx, myy, mxy) = (mx.mul(&mx)?, my.mul(&my)?, mx.mul(&my)?);
    let vx = filt(x.mul(&x)?)?.sub(&mxx)?;
    let vy = filt(y.mul(&y)?)?.sub(&myy)?;
    let cov = filt(x.mul(&y)?)?.sub(&mxy)?;
    let (c1, c2) = (K1 * K1, K2 * K2);
    let num = mxy.scale(2.0).add_scalar(c1).mul(&cov.scale(2.0).add_scalar(c2))?;
    let den = mxx.add(&myy)?.add_scalar(c1).mul(&vx.add(&vy)?.add_scalar(c2))?;
    Ok(num.div(&den)?.mean().scale(-1.0).add_scalar(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, "metrics-test", 0);
        Tensor::from_fn(shape, |_| r.random::<f64>())
    }

    #[test]
    fn psnr_reference_values() {
        let x = random(&[8, 8, 3], 0);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP_DB);
        let shifted = x.map(|v| v + 0.1);
        assert!((psnr(&x, &shifted, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&x, &random(&[8, 8, 1], 0), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_sign_and_symmetry() {
        let x = random(&[24, 20, 3], 1);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let inv = x.map(|v| 1.0 - v);
        assert!(ssim(&x, &inv).unwrap() < 0.0);
        let y = random(&[24, 20, 3], 2);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        assert!(ssim(&random(&[10, 30, 1], 0), &random(&[10, 30, 1], 1)).is_err());
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let g = gaussian_taps();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(g[i], g[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn tape_loss_matches_direct_ssim() {
        for (c, seed) in [(1, 3), (3, 4)] {
            let a = random(&[2, 16, 13, c], seed);
            let b = random(&[2, 16, 13, c], seed + 10);
            let tape = Tape::new();
            let loss = ssim_loss(tape.constant(&a), tape.constant(&b)).unwrap().item().unwrap();
            let parts_a = a.unstack().unwrap();
            let parts_b = b.unstack().unwrap();
            let direct: f64 = parts_a
                .iter()
                .zip(&parts_b)
                .map(|(x, y)| ssim(x, y).unwrap())
                .sum::<f64>()
                / 2.0;
            assert!((loss - (1.0 - direct)).abs() < 1e-12, "{loss} vs {}", 1.0 - direct);
        }
    }
}
