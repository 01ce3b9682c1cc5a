//! Synthetic benchmark generator with a planted abundance signal.
//!
//! Every sample draws records as taxon prototypes plus Gaussian noise; in
//! class-1 samples the signal taxon's abundance is multiplied by `beta`
//! while the embedding distribution stays identical across classes. The
//! classes are therefore separable only through abundance-aware
//! aggregation, never through unweighted means of unique records.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{Sample, SequenceRecord};
use crate::dataio;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub records_min: usize,
    pub records_max: usize,
    pub dim: usize,
    /// Number of taxon prototype vectors.
    pub taxa: usize,
    /// Index of the taxon whose abundance carries the class signal.
    pub signal_taxon: usize,
    /// Class-1 multiplier on the signal taxon's abundance.
    pub beta: f64,
    /// Noise scale around each prototype.
    pub sigma: f64,
    /// Log-scale spread of the log-normal abundance draws.
    pub abundance_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 200,
            records_min: 6,
            records_max: 12,
            dim: 32,
            taxa: 8,
            signal_taxon: 0,
            beta: 8.0,
            sigma: 0.3,
            abundance_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Config("n_samples must be >= 2".into()));
        }
        if self.taxa < 2 {
            return Err(Error::Config("taxa must be >= 2".into()));
        }
        if self.signal_taxon >= self.taxa {
            return Err(Error::Config(format!(
                "signal_taxon {} out of range for {} taxa",
                self.signal_taxon, self.taxa
            )));
        }
        if self.beta < 1.0 {
            return Err(Error::Config(format!(
                "beta {} must be >= 1 (1 disables the signal)",
                self.beta
            )));
        }
        if self.sigma < 0.0 {
            return Err(Error::Config("sigma must be >= 0".into()));
        }
        if self.abundance_sigma < 0.0 {
            return Err(Error::Config("abundance_sigma must be >= 0".into()));
        }
        if self.records_min < 2 || self.records_max < self.records_min {
            return Err(Error::Config(
                "records range must satisfy 2 <= min <= max".into(),
            ));
        }
        if self.dim < 1 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Standard normal via Box-Muller on the given stream.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Log-normal abundance with mu = 0 and the configured log-scale spread.
fn lognormal(rng: &mut ChaCha8Rng, sigma_ln: f64) -> f64 {
    (sigma_ln * gaussian(rng)).exp()
}

/// Generate a labeled dataset in memory. Labels are balanced: the first half
/// of the ids is class 0, the second class 1.
pub fn generate(config: &SynthConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let prototypes: Vec<Vec<f64>> = (0..config.taxa)
        .map(|_| (0..config.dim).map(|_| gaussian(&mut rng)).collect())
        .collect();

    let mut samples = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples {
        let label = usize::from(i >= config.n_samples / 2);
        let n_records = rng.random_range(config.records_min..=config.records_max);
        // The signal taxon appears in every sample so that presence carries
        // no class information; the rest are distinct taxa while they last,
        // then repeats.
        let mut taxa_choice = vec![config.signal_taxon];
        let mut others: Vec<usize> =
            (0..config.taxa).filter(|&t| t != config.signal_taxon).collect();
        for k in 1..n_records {
            if others.is_empty() {
                let mut t = rng.random_range(0..config.taxa - 1);
                if t >= config.signal_taxon {
                    t += 1;
                }
                taxa_choice.push(t);
                continue;
            }
            let j = rng.random_range(0..others.len());
            taxa_choice.push(others.swap_remove(j));
            let _ = k;
        }
        let records = taxa_choice
            .iter()
            .map(|&t| {
                let embedding = prototypes[t]
                    .iter()
                    .map(|&p| p + config.sigma * gaussian(&mut rng))
                    .collect();
                let mut abundance = lognormal(&mut rng, config.abundance_sigma);
                if t == config.signal_taxon && label == 1 {
                    abundance *= config.beta;
                }
                SequenceRecord { embedding, abundance }
            })
            .collect();
        samples.push(Sample {
            id: format!("synth{i:05}"),
            records,
            label: Some(label),
        });
    }
    Ok(samples)
}

/// Generate and write a dataset in the manifest/record-file layout; returns
/// the manifest path.
pub fn generate_to_dir(config: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    let samples = generate(config)?;
    dataio::write_dataset(dir, &samples)
}
