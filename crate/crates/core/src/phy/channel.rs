use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PhyError;

/// AWGN parameters: per-symbol noise variance is `10^(-snr_db/10)` relative to
/// unit signal power, split equally between I and Q.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub snr_db: f64,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn new(snr_db: f64, seed: u64) -> Result<Self, PhyError> {
        if !snr_db.is_finite() {
            return Err(PhyError::Snr(snr_db));
        }
        Ok(Self { snr_db, seed })
    }

    pub fn noise_variance(&self) -> f64 {
        10f64.powf(-self.snr_db / 10.0)
    }
}

/// What sits between the two endpoints for the text and latent streams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LinkModel {
    Noiseless,
    Awgn(ChannelConfig),
}

/// Seeded noise source for one link. Successive calls continue the same
/// stream, so every frame sees fresh noise.
#[derive(Debug, Clone)]
pub struct AwgnChannel {
    config: ChannelConfig,
    normal: Normal<f64>,
    rng: ChaCha8Rng,
}

impl AwgnChannel {
    pub fn new(config: ChannelConfig) -> Result<Self, PhyError> {
        let config = ChannelConfig::new(config.snr_db, config.seed)?;
        let sigma = (config.noise_variance() / 2.0).sqrt();
        Ok(Self {
            config,
            normal: Normal::new(0.0, sigma).expect("finite sigma"),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    /// Independent noise stream `stream` under the same seed.
    pub fn with_stream(config: ChannelConfig, stream: u64) -> Result<Self, PhyError> {
        let mut channel = Self::new(config)?;
        channel.rng.set_stream(stream);
        Ok(channel)
    }

    pub fn config(&self) -> ChannelConfig {
        self.config
    }

    pub fn add_noise(&mut self, symbols: &mut [Complex64]) {
        for s in symbols.iter_mut() {
            let re = self.normal.sample(&mut self.rng);
            let im = self.normal.sample(&mut self.rng);
            *s += Complex64::new(re, im);
        }
    }
}

/// One-shot channel use with a fresh generator seeded from `config`.
pub fn awgn(symbols: &[Complex64], config: ChannelConfig) -> Result<Vec<Complex64>, PhyError> {
    let mut channel = AwgnChannel::new(config)?;
    let mut out = symbols.to_vec();
    channel.add_noise(&mut out);
    Ok(out)
}

pub fn mean_power(symbols: &[Complex64]) -> f64 {
    if symbols.is_empty() {
        return 0.0;
    }
    symbols.iter().map(|s| s.norm_sqr()).sum::<f64>() / symbols.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanishing_noise() {
        let x = vec![Complex64::new(0.3, -0.9); 1000];
        let y = awgn(&x, ChannelConfig::new(300.0, 1).unwrap()).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn noise_variance_at_5db() {
        let n = 1_000_000;
        let x = vec![Complex64::new(0.0, 0.0); n];
        let y = awgn(&x, ChannelConfig::new(5.0, 42).unwrap()).unwrap();
        let var = mean_power(&y);
        let expected = 10f64.powf(-0.5);
        assert!((var / expected - 1.0).abs() < 0.01, "{var} vs {expected}");
        let mean_re: f64 = y.iter().map(|s| s.re).sum::<f64>() / n as f64;
        assert!(mean_re.abs() < 3e-3);
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let x = vec![Complex64::new(1.0, 0.0); 64];
        let cfg = ChannelConfig::new(7.0, 11).unwrap();
        assert_eq!(awgn(&x, cfg).unwrap(), awgn(&x, cfg).unwrap());
        let other = ChannelConfig::new(7.0, 12).unwrap();
        assert_ne!(awgn(&x, cfg).unwrap(), awgn(&x, other).unwrap());
    }

    #[test]
    fn streams_are_independent() {
        let x = vec![Complex64::new(0.0, 0.0); 8];
        let cfg = ChannelConfig::new(5.0, 9).unwrap();
        let draw = |stream| {
            let mut ch = AwgnChannel::with_stream(cfg, stream).unwrap();
            let mut y = x.clone();
            ch.add_noise(&mut y);
            y
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn rejects_infinite_snr() {
        assert_eq!(
            ChannelConfig::new(f64::INFINITY, 0),
            Err(PhyError::Snr(f64::INFINITY))
        );
    }

    #[test]
    fn length_preserved() {
        let x = vec![Complex64::new(1.0, 1.0); 17];
        assert_eq!(
            awgn(&x, ChannelConfig::new(5.0, 0).unwrap()).unwrap().len(),
            17
        );
    }
}
