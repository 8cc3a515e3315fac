//! Hermetic toy backends.
//!
//! None of these approximate a real generative model. They are built so every
//! downstream property has a closed form:
//!
//! * the encoder average-pools each image channel onto the latent grid and
//!   appends a luma channel, so it is linear and lossless on images that are
//!   constant over each pooling cell;
//! * the decoder upsamples the colour channels by nearest neighbour;
//! * the denoiser is the exact noise predictor of a point-mass prior at `μ`,
//!   which makes a DDIM trajectory land on `μ` at step zero;
//! * the captioner fills a fixed sentence template from quantized brightness
//!   and per-half hue.

use std::sync::Arc;

use super::{
    check_latent, BackendError, BackendSuite, Captioner, DenoiseInput, Denoiser, Image,
    ImageDecoder, LatentEncoder,
};
use crate::latent::{LatentShape, LatentTensor, TensorDims};

/// Every word the template captioner can emit.
pub const VOCABULARY: [&str; 16] = [
    "a", "image", "with", "top", "and", "bottom", "dark", "medium", "bright", "gray", "red",
    "yellow", "green", "cyan", "blue", "magenta",
];

/// Magnitude of the caption-dependent prior shift per unit guidance.
pub const GUIDANCE_BIAS: f64 = 1e-3;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn luma(rgb: &[f64]) -> f64 {
    if rgb.len() == 3 {
        rgb.iter().zip(LUMA).map(|(c, w)| c * w).sum()
    } else {
        rgb.iter().sum::<f64>() / rgb.len() as f64
    }
}

/// Builds the toy suite for `dims`. Requires `C_L = C + 1` and latent sizes
/// that divide the image sizes.
pub fn suite(dims: TensorDims) -> Result<BackendSuite, BackendError> {
    if dims.latent_channels != dims.channels + 1
        || dims.height % dims.latent_height != 0
        || dims.width % dims.latent_width != 0
    {
        return Err(BackendError::Dims {
            what: "toy suite",
            expected: "C_L = C + 1 and latent sizes dividing image sizes".into(),
            found: format!("{dims:?}"),
        });
    }
    Ok(BackendSuite {
        dims,
        encoder: Arc::new(PoolingEncoder { dims }),
        decoder: Arc::new(NearestDecoder { dims }),
        denoiser: Arc::new(GaussianPriorDenoiser {
            shape: dims.latent_shape(),
        }),
        captioner: Arc::new(TemplateCaptioner),
        concurrent: true,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct PoolingEncoder {
    pub dims: TensorDims,
}

impl LatentEncoder for PoolingEncoder {
    fn encode(&self, image: &Image) -> Result<LatentTensor, BackendError> {
        let d = self.dims;
        let expected = [d.channels, d.height, d.width];
        if image.dims() != expected {
            return Err(BackendError::Dims {
                what: "encoder input",
                expected: format!("{expected:?}"),
                found: format!("{:?}", image.dims()),
            });
        }
        let (fy, fx) = (d.height / d.latent_height, d.width / d.latent_width);
        let norm = (fy * fx) as f64;
        let shape = d.latent_shape();
        let mut z = LatentTensor::zeros(shape);
        for c in 0..d.channels {
            let plane = image.plane(c);
            for u in 0..d.latent_height {
                for v in 0..d.latent_width {
                    // accumulate deviations from the corner so constant blocks pool exactly
                    let base = plane[u * fy * d.width + v * fx];
                    let mut dev = 0.0;
                    for y in u * fy..(u + 1) * fy {
                        let row = &plane[y * d.width + v * fx..y * d.width + (v + 1) * fx];
                        dev += row.iter().map(|p| p - base).sum::<f64>();
                    }
                    z.set(c, u, v, base + dev / norm);
                }
            }
        }
        let mut rgb = vec![0.0; d.channels];
        for u in 0..d.latent_height {
            for v in 0..d.latent_width {
                for (c, slot) in rgb.iter_mut().enumerate() {
                    *slot = z.get(c, u, v);
                }
                z.set(d.channels, u, v, luma(&rgb));
            }
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NearestDecoder {
    pub dims: TensorDims,
}

impl ImageDecoder for NearestDecoder {
    fn decode(&self, latent: &LatentTensor) -> Result<Image, BackendError> {
        let d = self.dims;
        check_latent(d.latent_shape(), latent)?;
        let (fy, fx) = (d.height / d.latent_height, d.width / d.latent_width);
        Ok(Image::from_fn(d.channels, d.height, d.width, |c, y, x| {
            latent.get(c, y / fy, x / fx)
        }))
    }
}

/// 3x3 box blur per channel, averaging over in-bounds neighbours.
pub fn box_blur(z: &LatentTensor) -> LatentTensor {
    let s = z.shape();
    LatentTensor::from_fn(s, |c, u, v| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for uu in u.saturating_sub(1)..=(u + 1).min(s.height - 1) {
            for vv in v.saturating_sub(1)..=(v + 1).min(s.width - 1) {
                sum += z.get(c, uu, vv);
                count += 1;
            }
        }
        sum / count as f64
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Uniform shift the toy prior applies for a caption at `guidance`:
/// `±GUIDANCE_BIAS * guidance`, sign taken from a hash of the caption.
pub fn caption_bias(caption: Option<&str>, guidance: f64) -> f64 {
    match caption {
        Some(text) if guidance != 0.0 => {
            let sign = if fnv1a(text.as_bytes()) & 1 == 0 {
                1.0
            } else {
                -1.0
            };
            sign * GUIDANCE_BIAS * guidance
        }
        _ => 0.0,
    }
}

/// Prior mean `μ`: box-blurred known latent plus the caption bias.
pub fn prior_mean(known: &LatentTensor, caption: Option<&str>, guidance: f64) -> LatentTensor {
    let mut mu = box_blur(known);
    let bias = caption_bias(caption, guidance);
    if bias != 0.0 {
        mu.values_mut().iter_mut().for_each(|v| *v += bias);
    }
    mu
}

/// `ε̂ = (z − √ᾱ·target) / √(1 − ᾱ)`.
fn implied_noise(
    z: &LatentTensor,
    target: &LatentTensor,
    alpha_bar: f64,
) -> Result<LatentTensor, BackendError> {
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(BackendError::Failed(format!(
            "noise prediction needs 0 < alpha_bar < 1, got {alpha_bar}"
        )));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let values = z
        .values()
        .iter()
        .zip(target.values())
        .map(|(zv, t)| (zv - a * t) / b)
        .collect();
    LatentTensor::from_vec(z.shape(), values).map_err(|e| BackendError::Failed(e.to_string()))
}

/// Noise predictor of a point-mass prior at [`prior_mean`].
#[derive(Debug, Clone, Copy)]
pub struct GaussianPriorDenoiser {
    pub shape: LatentShape,
}

impl Denoiser for GaussianPriorDenoiser {
    fn denoise(&self, input: &DenoiseInput<'_>) -> Result<LatentTensor, BackendError> {
        check_latent(self.shape, input.latent)?;
        check_latent(self.shape, input.known)?;
        let mu = prior_mean(input.known, input.caption, input.guidance);
        implied_noise(input.latent, &mu, input.alpha_bar)
    }
}

/// Oracle that knows the true latent and returns the exact implied noise.
#[derive(Debug, Clone)]
pub struct ExactDenoiser {
    pub target: LatentTensor,
}

impl Denoiser for ExactDenoiser {
    fn denoise(&self, input: &DenoiseInput<'_>) -> Result<LatentTensor, BackendError> {
        check_latent(self.target.shape(), input.latent)?;
        implied_noise(input.latent, &self.target, input.alpha_bar)
    }
}

/// `"a <brightness> image with <colour> top and <colour> bottom"`.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateCaptioner;

fn brightness_word(mean_luma: f64) -> &'static str {
    if mean_luma < 1.0 / 3.0 {
        "dark"
    } else if mean_luma < 2.0 / 3.0 {
        "medium"
    } else {
        "bright"
    }
}

/// Saturation (max − min) below which a region reads as gray.
pub const GRAY_THRESHOLD: f64 = 0.1;

/// Hue word for a mean RGB triple; six 60° bins centred on the primaries and
/// secondaries.
pub fn colour_word(rgb: [f64; 3]) -> &'static str {
    let max = rgb.iter().copied().fold(f64::MIN, f64::max);
    let min = rgb.iter().copied().fold(f64::MAX, f64::min);
    let delta = max - min;
    if delta < GRAY_THRESHOLD {
        return "gray";
    }
    let [r, g, b] = rgb;
    let hue = if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    const WORDS: [&str; 6] = ["red", "yellow", "green", "cyan", "blue", "magenta"];
    WORDS[(((hue + 30.0) / 60.0).floor() as usize) % 6]
}

fn region_mean(image: &Image, rows: std::ops::Range<usize>) -> [f64; 3] {
    let mut out = [0.0; 3];
    if image.channels() != 3 || rows.is_empty() {
        return out;
    }
    let n = (rows.len() * image.width()) as f64;
    for (c, slot) in out.iter_mut().enumerate() {
        let plane = image.plane(c);
        *slot = plane[rows.start * image.width()..rows.end * image.width()]
            .iter()
            .sum::<f64>()
            / n;
    }
    out
}

impl Captioner for TemplateCaptioner {
    fn caption(&self, image: &Image) -> Result<String, BackendError> {
        let n = (image.height() * image.width()) as f64;
        let means: Vec<f64> = (0..image.channels())
            .map(|c| image.plane(c).iter().sum::<f64>() / n)
            .collect();
        let brightness = brightness_word(luma(&means));
        let half = image.height() / 2;
        let top = colour_word(region_mean(image, 0..half));
        let bottom = colour_word(region_mean(image, half..image.height()));
        Ok(format!(
            "a {brightness} image with {top} top and {bottom} bottom"
        ))
    }
}
