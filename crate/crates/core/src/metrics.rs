//! Pixel-domain fidelity metrics.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5), `K₁ = 0.01`, `K₂ = 0.03`,
//! dynamic range 1, and averages the map over all fully contained windows and
//! all channels. There is no downsampling pass.

use thiserror::Error;

use crate::backends::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("image dims differ: {a:?} vs {b:?}")]
    Dims { a: [usize; 3], b: [usize; 3] },
    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    TooSmall {
        height: usize,
        width: usize,
        window: usize,
    },
    #[error("empty image")]
    Empty,
}

fn same_dims(a: &Image, b: &Image) -> Result<(), MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::Dims {
            a: a.dims(),
            b: b.dims(),
        });
    }
    if a.values().is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - c;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(plane: &[f64], height: usize, width: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (height - k + 1, width - k + 1);
    let mut rows = vec![0.0; height * ow];
    for y in 0..height {
        let line = &plane[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let taps = gaussian_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels() {
        let (pa, pb) = (a.plane(c), b.plane(c));
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(pa, h, w, &taps);
        let mu_b = filter_valid(pb, h, w, &taps);
        let e_aa = filter_valid(&aa, h, w, &taps);
        let e_bb = filter_valid(&bb, h, w, &taps);
        let e_ab = filter_valid(&ab, h, w, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        count += mu_a.len();
    }
    Ok(total / count as f64)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    let n = a.values().len() as f64;
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// `10·log10(1/MSE)`; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * e.log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(c, h, w, |_, _, _| rng.random())
    }

    /// Direct 2-D evaluation with an independently built window.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let k = 11usize;
        let mut win = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                win[i * k + j] = (-(di * di + dj * dj) / 4.5).exp();
            }
        }
        let s: f64 = win.iter().sum();
        win.iter_mut().for_each(|v| *v /= s);
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut n = 0;
        for c in 0..a.channels() {
            for y in 0..=a.height() - k {
                for x in 0..=a.width() - k {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let wgt = win[i * k + j];
                            let (p, q) = (a.get(c, y + i, x + j), b.get(c, y + i, x + j));
                            ma += wgt * p;
                            mb += wgt * q;
                            saa += wgt * p * p;
                            sbb += wgt * q * q;
                            sab += wgt * p * q;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn identical_is_one() {
        let a = random_image(3, 20, 17, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn constant_images_closed_form() {
        let (u, v) = (0.2, 0.7);
        let a = Image::filled(1, 16, 16, u);
        let b = Image::filled(1, 16, 16, v);
        let c1 = 1e-4;
        let expected = (2.0 * u * v + c1) / (u * u + v * v + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn inverted_binary_is_strongly_negative() {
        let a = Image::from_fn(1, 24, 24, |_, y, x| ((y / 2 + x / 2) % 2) as f64);
        let b = Image::from_fn(1, 24, 24, |_, y, x| 1.0 - ((y / 2 + x / 2) % 2) as f64);
        let s = ssim(&a, &b).unwrap();
        assert!(s < -0.9, "{s}");
        assert!((s - ssim_oracle(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_oracle() {
        for seed in 0..4 {
            let a = random_image(2, 15, 19, seed);
            let b = random_image(2, 15, 19, seed + 100);
            assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn psnr_closed_form_and_oracle() {
        let a = Image::filled(3, 4, 4, 0.5);
        let b = Image::filled(3, 4, 4, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let x = random_image(3, 9, 9, 5);
        let y = random_image(3, 9, 9, 6);
        let mut acc = 0.0;
        for c in 0..3 {
            for i in 0..9 {
                for j in 0..9 {
                    acc += (x.get(c, i, j) - y.get(c, i, j)).powi(2);
                }
            }
        }
        let expected = 10.0 * (1.0 / (acc / 243.0)).log10();
        assert!((psnr(&x, &y).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let a = Image::filled(3, 12, 12, 0.0);
        let b = Image::filled(3, 12, 13, 0.0);
        assert!(matches!(ssim(&a, &b), Err(MetricError::Dims { .. })));
        assert!(matches!(psnr(&a, &b), Err(MetricError::Dims { .. })));
        let small = Image::filled(1, 10, 30, 0.0);
        assert!(matches!(
            ssim(&small, &small),
            Err(MetricError::TooSmall { .. })
        ));
        let empty = Image::filled(0, 12, 12, 0.0);
        assert_eq!(psnr(&empty, &empty), Err(MetricError::Empty));
    }

    #[test]
    fn taps_are_normalized() {
        let t = gaussian_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[10]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn symmetric_and_bounded(seed in any::<u64>(), h in 11usize..16, w in 11usize..16) {
            let a = random_image(2, h, w, seed);
            let b = random_image(2, h, w, seed ^ 0x55);
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(ab <= 1.0 + 1e-12);
        }
    }
}
