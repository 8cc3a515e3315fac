//! Quick invariant checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backends::toy::{ExactDenoiser, GaussianPriorDenoiser};
use crate::backends::{BackendSuite, Image};
use crate::control::{rouge_l, run_session, SessionConfig, TerminatedBy};
use crate::diffusion::{run_inpainting, strength, DiffusionSchedule, InpaintParams};
use crate::latent::{lift_mask, BlockIndex, BlockMask, LatentTensor, TensorDims};
use crate::phy::{
    decode_symbols, deserialize_latent, encode_bits, serialize_latent, Demod, LinkModel,
};
use crate::session::{Frame, FrameKind, MetaPayload};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn from(name: &'static str, outcome: Result<String, String>) -> Self {
        match outcome {
            Ok(detail) => Self {
                name,
                passed: true,
                detail,
            },
            Err(detail) => Self {
                name,
                passed: false,
                detail,
            },
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn phy_round_trip(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..50 {
        let n = rng.random_range(1..64);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let bits = serialize_latent(&values).map_err(|e| e.to_string())?;
        let frame = encode_bits(&bits);
        let out = decode_symbols(&frame.symbols, frame.pad_bits, Demod::Hard)
            .map_err(|e| e.to_string())?;
        let back = deserialize_latent(&out, n).map_err(|e| e.to_string())?;
        ensure(
            back.iter()
                .zip(&values)
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            || "payload changed".into(),
        )?;
    }
    Ok("50 noiseless payloads bit-exact".into())
}

fn strength_range() -> Result<String, String> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for snr in 5..=10 {
        for k in 0..=6 {
            let s = strength(snr as f64, 0.5 + 0.0625 * k as f64);
            lo = lo.min(s);
            hi = hi.max(s);
        }
    }
    ensure(
        lo >= std::f64::consts::FRAC_1_SQRT_2 - 1e-5 && hi <= 1.0,
        || format!("range [{lo}, {hi}]"),
    )?;
    Ok(format!("s in [{lo:.5}, {hi:.5}]"))
}

fn sampler_exact(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = TensorDims::new([3, 32, 32], [4, 8, 8]).map_err(|e| e.to_string())?;
    let shape = dims.latent_shape();
    let target = LatentTensor::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0));
    let grid = crate::latent::partition(8, 8, 2).map_err(|e| e.to_string())?;
    let bits: Vec<bool> = (0..grid.count()).map(|_| rng.random_bool(0.5)).collect();
    let mask = lift_mask(&BlockMask::new(grid, bits).map_err(|e| e.to_string())?);
    let mut known = target.clone();
    for (v, &w) in known
        .values_mut()
        .iter_mut()
        .zip(mask.cells().iter().cycle())
    {
        if w {
            *v = 0.0;
        }
    }
    let schedule = DiffusionSchedule::linear(50).map_err(|e| e.to_string())?;
    let params = InpaintParams::new(9.0, 1.0, &schedule).map_err(|e| e.to_string())?;
    let exact = ExactDenoiser {
        target: target.clone(),
    };
    let out = run_inpainting(&known, &mask, None, &params, &schedule, &exact)
        .map_err(|e| e.to_string())?;
    let err = out.max_abs_diff(&target);
    ensure(err < 1e-8, || format!("exact denoiser error {err:e}"))?;
    let prior = GaussianPriorDenoiser { shape };
    let out = run_inpainting(&known, &mask, None, &params, &schedule, &prior)
        .map_err(|e| e.to_string())?;
    let clamped = out
        .values()
        .iter()
        .zip(known.values())
        .zip(mask.cells().iter().cycle())
        .all(|((a, b), &w)| w || a.to_bits() == b.to_bits());
    ensure(clamped, || "transmitted cells moved".into())?;
    Ok(format!("exact denoiser error {err:.1e}"))
}

fn rouge_fixtures() -> Result<String, String> {
    let cases = [
        ("a b c d", "a b c d", 1.0),
        ("a b c d", "x y z", 0.0),
        ("a b c d", "a c d", 6.0 / 7.0),
        ("", "", 0.0),
    ];
    for (c, r, want) in cases {
        let got = rouge_l(c, r);
        ensure((got - want).abs() < 1e-12, || {
            format!("`{c}` vs `{r}`: {got} != {want}")
        })?;
    }
    Ok(format!("{} fixtures", cases.len()))
}

fn wire_round_trip() -> Result<String, String> {
    let dims = TensorDims::reference();
    let grid = crate::latent::partition(dims.latent_height, dims.latent_width, 4)
        .map_err(|e| e.to_string())?;
    let withheld = [
        BlockIndex { row: 1, col: 2 },
        BlockIndex { row: 15, col: 0 },
    ];
    let mask = BlockMask::from_withheld(grid, &withheld).map_err(|e| e.to_string())?;
    let meta = MetaPayload {
        dims,
        block_side: 4,
        q0: 0.125,
        seed: 3,
        caption_follows: true,
        mask,
    };
    let payload = meta.encode().map_err(|e| e.to_string())?;
    let frame = Frame::new(FrameKind::Meta, 0, payload);
    let bytes = frame.encode().map_err(|e| e.to_string())?;
    let back = Frame::decode(&bytes).map_err(|e| e.to_string())?;
    ensure(back == frame, || "frame changed".into())?;
    let meta_back = MetaPayload::decode(&back.payload).map_err(|e| e.to_string())?;
    ensure(meta_back == meta, || "META changed".into())?;
    Ok(format!("META frame {} bytes", bytes.len()))
}

fn zero_threshold(seed: u64) -> Result<String, String> {
    let dims = TensorDims::new([3, 32, 32], [4, 8, 8]).map_err(|e| e.to_string())?;
    let suite = BackendSuite::toy(dims).map_err(|e| e.to_string())?;
    let image = Image::from_fn(3, 32, 32, |c, y, x| ((c + y / 8 + x / 8) % 3) as f64 / 2.0);
    let cfg = SessionConfig {
        tau: 0.0,
        block_side: 2,
        seed,
        ..SessionConfig::default()
    };
    let result =
        run_session(&image, &cfg, &suite, LinkModel::Noiseless).map_err(|e| e.to_string())?;
    ensure(
        result.final_round() == 0 && result.terminated_by == TerminatedBy::Threshold,
        || {
            format!(
                "stopped at t={} by {:?}",
                result.final_round(),
                result.terminated_by
            )
        },
    )?;
    Ok("stops at t=0".into())
}

/// Runs every check with `seed` and reports each outcome.
pub fn run_selftest(seed: u64) -> Vec<Check> {
    vec![
        Check::from("phy_round_trip", phy_round_trip(seed)),
        Check::from("strength_range", strength_range()),
        Check::from("sampler_exactness", sampler_exact(seed)),
        Check::from("rouge_l_fixtures", rouge_fixtures()),
        Check::from("wire_round_trip", wire_round_trip()),
        Check::from("zero_threshold", zero_threshold(seed)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for check in run_selftest(11) {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }
}
