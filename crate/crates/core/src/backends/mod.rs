//! Interfaces for the learned components of the link (latent encoder, image
//! decoder, text-conditioned denoiser, captioner) and their implementations.
//!
//! [`toy`] is a hermetic suite whose behaviour is checkable in closed form.
//! [`bridge`] forwards every call to an out-of-process model server.

pub mod bridge;
pub mod toy;

use std::sync::Arc;

use thiserror::Error;

use crate::latent::{LatentShape, LatentTensor, PixelMask, TensorDims};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("{what}: expected {expected}, found {found}")]
    Dims {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("capability unavailable: {0}")]
    Unavailable(String),
    #[error("backend failure: {0}")]
    Failed(String),
    #[error("bridge protocol: {0}")]
    Protocol(String),
    #[error("bridge i/o: {0}")]
    Io(String),
}

/// Normalized intensity image, `C x H x W`, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Image {
    /// Values are clamped into `[0, 1]`; non-finite values become 0.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self, BackendError> {
        if values.len() != channels * height * width {
            return Err(BackendError::Dims {
                what: "image values",
                expected: format!("{}", channels * height * width),
                found: format!("{}", values.len()),
            });
        }
        let values = values
            .into_iter()
            .map(|v| {
                if v.is_finite() {
                    v.clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self::from_fn(channels, height, width, |_, _, _| value)
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let v = f(c, y, x);
                    values.push(if v.is_finite() {
                        v.clamp(0.0, 1.0)
                    } else {
                        0.0
                    });
                }
            }
        }
        Self {
            channels,
            height,
            width,
            values,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }
}

/// Inputs of one denoiser evaluation.
///
/// `known` is the zero-filled partial latent assembled from received blocks
/// and `mask` marks the withheld cells; inpainting-conditioned models take
/// both as conditioning.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseInput<'a> {
    pub latent: &'a LatentTensor,
    pub step: usize,
    pub alpha_bar: f64,
    pub caption: Option<&'a str>,
    /// Guidance scale; `0` means unconditioned.
    pub guidance: f64,
    pub known: &'a LatentTensor,
    pub mask: &'a PixelMask,
}

pub trait LatentEncoder: Send + Sync {
    fn encode(&self, image: &Image) -> Result<LatentTensor, BackendError>;
}

pub trait ImageDecoder: Send + Sync {
    fn decode(&self, latent: &LatentTensor) -> Result<Image, BackendError>;
}

/// Predicts the noise component of a latent at step `n`.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, input: &DenoiseInput<'_>) -> Result<LatentTensor, BackendError>;
}

pub trait Captioner: Send + Sync {
    fn caption(&self, image: &Image) -> Result<String, BackendError>;
}

/// Perceptual and cross-modal scores that need pretrained networks.
pub trait QualityScorer: Send + Sync {
    fn lpips(&self, a: &Image, b: &Image) -> Result<f64, BackendError>;
    fn clip_it(&self, image: &Image, caption: &str) -> Result<f64, BackendError>;
    fn fid(&self, generated: &[Image], reference: &[Image]) -> Result<f64, BackendError>;
}

/// The four capability handles a session needs.
#[derive(Clone)]
pub struct BackendSuite {
    pub dims: TensorDims,
    pub encoder: Arc<dyn LatentEncoder>,
    pub decoder: Arc<dyn ImageDecoder>,
    pub denoiser: Arc<dyn Denoiser>,
    pub captioner: Arc<dyn Captioner>,
    /// Whether several sessions may call into the suite at once.
    pub concurrent: bool,
}

impl std::fmt::Debug for BackendSuite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendSuite")
            .field("dims", &self.dims)
            .field("concurrent", &self.concurrent)
            .finish_non_exhaustive()
    }
}

impl BackendSuite {
    pub fn toy(dims: TensorDims) -> Result<Self, BackendError> {
        toy::suite(dims)
    }

    pub fn latent_shape(&self) -> LatentShape {
        self.dims.latent_shape()
    }

    pub fn with_captioner(mut self, captioner: Arc<dyn Captioner>) -> Self {
        self.captioner = captioner;
        self
    }

    pub fn with_denoiser(mut self, denoiser: Arc<dyn Denoiser>) -> Self {
        self.denoiser = denoiser;
        self
    }

    pub fn check_image(&self, image: &Image) -> Result<(), BackendError> {
        let expected = [self.dims.channels, self.dims.height, self.dims.width];
        if image.dims() != expected {
            return Err(BackendError::Dims {
                what: "image",
                expected: format!("{expected:?}"),
                found: format!("{:?}", image.dims()),
            });
        }
        Ok(())
    }
}

pub(crate) fn check_latent(shape: LatentShape, z: &LatentTensor) -> Result<(), BackendError> {
    if z.shape() != shape {
        return Err(BackendError::Dims {
            what: "latent",
            expected: shape.to_string(),
            found: z.shape().to_string(),
        });
    }
    Ok(())
}
