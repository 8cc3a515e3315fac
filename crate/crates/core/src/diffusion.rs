//! DDIM inpainting on the latent grid.
//!
//! The trajectory starts at step `S = ⌈sT⌉` and walks down to zero. Each step
//! forms the unconstrained DDIM proposal from the denoiser's noise estimate,
//! then keeps the received cells on the forward-mapped known latent and takes
//! the proposal only on withheld cells.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, DenoiseInput, Denoiser};
use crate::latent::{LatentTensor, PixelMask};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InpaintError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("step {step} outside 1..={max}")]
    Step { step: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("strength {0} outside (0, 1]")]
    Strength(f64),
    #[error("denoiser failed at step {step}: {source}")]
    Denoiser {
        step: usize,
        #[source]
        source: BackendError,
    },
    #[error("denoiser returned a non-finite estimate at step {0}")]
    NonFinite(usize),
}

pub const BASE_TRAIN_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Cumulative signal fractions `ᾱ_0 = 1 > ᾱ_1 > … > ᾱ_T > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear-β DDPM schedule over 1000 base steps, subsampled uniformly to
    /// `steps` DDIM steps, with `ᾱ_0 = 1` prepended.
    pub fn linear(steps: usize) -> Result<Self, InpaintError> {
        if steps == 0 || steps > BASE_TRAIN_STEPS {
            return Err(InpaintError::Schedule(format!(
                "step count {steps} outside 1..={BASE_TRAIN_STEPS}"
            )));
        }
        let mut cumulative = Vec::with_capacity(BASE_TRAIN_STEPS);
        let mut acc = 1.0;
        for k in 0..BASE_TRAIN_STEPS {
            let beta =
                BETA_START + (BETA_END - BETA_START) * k as f64 / (BASE_TRAIN_STEPS - 1) as f64;
            acc *= 1.0 - beta;
            cumulative.push(acc);
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for n in 1..=steps {
            alpha_bar.push(cumulative[n * BASE_TRAIN_STEPS / steps - 1]);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self, InpaintError> {
        if alpha_bar.len() < 2 {
            return Err(InpaintError::Schedule("need at least one step".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(InpaintError::Schedule(format!(
                "alpha_bar[0] = {} != 1",
                alpha_bar[0]
            )));
        }
        for (n, w) in alpha_bar.windows(2).enumerate() {
            if !(w[1] < w[0] && w[1] > 0.0) {
                return Err(InpaintError::Schedule(format!(
                    "alpha_bar must decrease strictly within (0, 1]; fails at step {}",
                    n + 1
                )));
            }
        }
        Ok(Self { alpha_bar })
    }

    /// Maximum step `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n]
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `s = min{1, √d · (1 − 0.1·tanh(SNR − 10))}`.
pub fn strength(snr_db: f64, d: f64) -> f64 {
    (d.sqrt() * (1.0 - 0.1 * (snr_db - 10.0).tanh())).min(1.0)
}

/// `S = ⌈sT⌉`, kept within `[1, T]`.
pub fn step_count(s: f64, max_steps: usize) -> usize {
    // absorb float error such as 0.3 * 50 = 15.000000000000002
    let raw = (s * max_steps as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(max_steps)
}

fn same_shape(a: &LatentTensor, b: &LatentTensor) -> Result<(), InpaintError> {
    if a.shape() != b.shape() {
        return Err(InpaintError::Shape(format!(
            "{} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_step(n: usize, schedule: &DiffusionSchedule) -> Result<(), InpaintError> {
    if n == 0 || n > schedule.steps() {
        return Err(InpaintError::Step {
            step: n,
            max: schedule.steps(),
        });
    }
    Ok(())
}

fn zip_map(a: &LatentTensor, b: &LatentTensor, f: impl Fn(f64, f64) -> f64) -> LatentTensor {
    let mut out = a.clone();
    out.values_mut()
        .iter_mut()
        .zip(b.values())
        .for_each(|(x, &y)| *x = f(*x, y));
    out
}

/// Unconstrained DDIM step from `n` to `n − 1`.
pub fn ddim_proposal(
    z_n: &LatentTensor,
    eps_hat: &LatentTensor,
    n: usize,
    schedule: &DiffusionSchedule,
) -> Result<LatentTensor, InpaintError> {
    same_shape(z_n, eps_hat)?;
    check_step(n, schedule)?;
    let (a_n, a_prev) = (schedule.alpha_bar(n), schedule.alpha_bar(n - 1));
    let (sa_n, sb_n) = (a_n.sqrt(), (1.0 - a_n).sqrt());
    let (sa_prev, sb_prev) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    Ok(zip_map(z_n, eps_hat, |z, e| {
        sa_prev * (z - sb_n * e) / sa_n + sb_prev * e
    }))
}

/// `√ᾱ_n · z₀ + √(1 − ᾱ_n) · ε`; `eps = None` is the deterministic map.
pub fn forward_map(
    z0: &LatentTensor,
    n: usize,
    schedule: &DiffusionSchedule,
    eps: Option<&LatentTensor>,
) -> Result<LatentTensor, InpaintError> {
    if n > schedule.steps() {
        return Err(InpaintError::Step {
            step: n,
            max: schedule.steps(),
        });
    }
    let a = schedule.alpha_bar(n);
    let sa = a.sqrt();
    match eps {
        None => {
            let mut out = z0.clone();
            out.values_mut().iter_mut().for_each(|v| *v *= sa);
            Ok(out)
        }
        Some(e) => {
            same_shape(z0, e)?;
            let sb = (1.0 - a).sqrt();
            Ok(zip_map(z0, e, |z, e| sa * z + sb * e))
        }
    }
}

/// `(1 − M) ⊙ z_r + M ⊙ z_f`, with `M` broadcast over channels. Implemented
/// as a per-cell selection, so received cells are copied bit-for-bit.
pub fn inpaint_project(
    z_f: &LatentTensor,
    z_r: &LatentTensor,
    mask: &PixelMask,
) -> Result<LatentTensor, InpaintError> {
    same_shape(z_f, z_r)?;
    let shape = z_f.shape();
    if mask.height() != shape.height || mask.width() != shape.width {
        return Err(InpaintError::Shape(format!(
            "mask {}x{} vs latent {}",
            mask.height(),
            mask.width(),
            shape
        )));
    }
    let plane = shape.plane();
    let mut out = z_r.clone();
    for (k, v) in out.values_mut().iter_mut().enumerate() {
        if mask.cells()[k % plane] {
            *v = z_f.values()[k];
        }
    }
    Ok(out)
}

/// How the known latent is carried to intermediate steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ForwardNoise {
    /// `ε = 0`.
    #[default]
    Deterministic,
    /// One standard-normal draw per trajectory, seeded.
    Stochastic { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InpaintParams {
    /// Guidance scale `γ`; zero runs the denoiser unconditioned.
    pub guidance: f64,
    pub strength: f64,
    /// Starting step `S`.
    pub steps: usize,
    pub forward_noise: ForwardNoise,
}

impl InpaintParams {
    pub fn new(
        guidance: f64,
        strength: f64,
        schedule: &DiffusionSchedule,
    ) -> Result<Self, InpaintError> {
        if !(strength > 0.0 && strength <= 1.0) {
            return Err(InpaintError::Strength(strength));
        }
        Ok(Self {
            guidance,
            strength,
            steps: step_count(strength, schedule.steps()),
            forward_noise: ForwardNoise::Deterministic,
        })
    }
}

/// Runs the masked DDIM trajectory from `S` down to zero and returns `z⁰`.
///
/// `known` is the zero-filled partial latent. On unmasked cells the result
/// equals `known` exactly.
pub fn run_inpainting(
    known: &LatentTensor,
    mask: &PixelMask,
    caption: Option<&str>,
    params: &InpaintParams,
    schedule: &DiffusionSchedule,
    denoiser: &dyn Denoiser,
) -> Result<LatentTensor, InpaintError> {
    let start = params.steps;
    check_step(start, schedule)?;
    let shape = known.shape();
    if mask.height() != shape.height || mask.width() != shape.width {
        return Err(InpaintError::Shape(format!(
            "mask {}x{} vs latent {}",
            mask.height(),
            mask.width(),
            shape
        )));
    }
    let eps = match params.forward_noise {
        ForwardNoise::Deterministic => None,
        ForwardNoise::Stochastic { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Some(LatentTensor::from_fn(shape, |_, _, _| {
                StandardNormal.sample(&mut rng)
            }))
        }
    };

    let mut z = forward_map(known, start, schedule, eps.as_ref())?;
    for n in (1..=start).rev() {
        let input = DenoiseInput {
            latent: &z,
            step: n,
            alpha_bar: schedule.alpha_bar(n),
            caption,
            guidance: params.guidance,
            known,
            mask,
        };
        let eps_hat = denoiser
            .denoise(&input)
            .map_err(|source| InpaintError::Denoiser { step: n, source })?;
        same_shape(&z, &eps_hat)?;
        if !eps_hat.is_finite() {
            return Err(InpaintError::NonFinite(n));
        }
        let proposal = ddim_proposal(&z, &eps_hat, n, schedule)?;
        let carried = forward_map(known, n - 1, schedule, eps.as_ref())?;
        z = inpaint_project(&proposal, &carried, mask)?;
    }
    Ok(z)
}
