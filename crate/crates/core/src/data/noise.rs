//! Out-of-distribution perturbation battery: Gaussian, Perlin and Cutout.
//!
//! Perturbations touch window values only; horizons, dataset size and
//! sample order never change. Everything is deterministic per seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::substream;
use crate::scalar::Real;

use super::{DataError, SequenceDataset};

/// Base wavelength (in window positions) of the lowest Perlin octave.
pub const PERLIN_BASE_WAVELENGTH: f64 = 32.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseSpec {
    /// Add i.i.d. N(0, σ²) to every window value.
    Gaussian { sigma: f64 },
    /// Add octave-summed gradient noise rescaled into
    /// [-amplitude, +amplitude].
    Perlin { octaves: usize, amplitude: f64 },
    /// Overwrite ⌈ratio·L_in⌉ positions per window with a constant.
    Cutout { ratio: f64, fill: f64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        match *self {
            NoiseSpec::Gaussian { sigma } if sigma < 0.0 => {
                Err(DataError::Invalid(format!("negative sigma {sigma}")))
            }
            NoiseSpec::Perlin { octaves, amplitude } => {
                if octaves == 0 {
                    Err(DataError::Invalid("perlin needs at least one octave".into()))
                } else if amplitude < 0.0 {
                    Err(DataError::Invalid(format!("negative amplitude {amplitude}")))
                } else {
                    Ok(())
                }
            }
            NoiseSpec::Cutout { ratio, .. } if !(0.0..=1.0).contains(&ratio) => {
                Err(DataError::Invalid(format!("cutout ratio {ratio} outside [0,1]")))
            }
            _ => Ok(()),
        }
    }

    /// Short label for report columns.
    pub fn kind_name(&self) -> &'static str {
        match self {
            NoiseSpec::Gaussian { .. } => "gaussian",
            NoiseSpec::Perlin { .. } => "perlin",
            NoiseSpec::Cutout { .. } => "cutout",
        }
    }

    /// The kind's primary intensity parameter.
    pub fn level(&self) -> f64 {
        match *self {
            NoiseSpec::Gaussian { sigma } => sigma,
            NoiseSpec::Perlin { amplitude, .. } => amplitude,
            NoiseSpec::Cutout { ratio, .. } => ratio,
        }
    }

    /// Same kind at a different intensity.
    pub fn with_level(&self, level: f64) -> Self {
        match *self {
            NoiseSpec::Gaussian { .. } => NoiseSpec::Gaussian { sigma: level },
            NoiseSpec::Perlin { octaves, .. } => NoiseSpec::Perlin {
                octaves,
                amplitude: level,
            },
            NoiseSpec::Cutout { fill, .. } => NoiseSpec::Cutout { ratio: level, fill },
        }
    }
}

/// Apply a perturbation to every window of the dataset.
pub fn apply_noise<T: Real>(
    dataset: &SequenceDataset<T>,
    spec: &NoiseSpec,
    seed: u64,
) -> Result<SequenceDataset<T>, DataError> {
    spec.validate()?;
    let mut windows = dataset.windows().clone();
    let (n, l_in) = (dataset.len(), dataset.window_len());
    match *spec {
        NoiseSpec::Gaussian { sigma } => {
            if sigma > 0.0 {
                let mut rng = substream(seed, 0);
                let s = T::cast(sigma);
                for v in windows.data_mut() {
                    *v += s * T::standard_normal(&mut rng);
                }
            }
        }
        NoiseSpec::Perlin { octaves, amplitude } => {
            // Raw octave-summed fields for the whole dataset, then one
            // affine rescale so the additive field spans exactly
            // [-amplitude, +amplitude] across all samples.
            let mut fields = vec![0.0f64; n * l_in];
            for i in 0..n {
                for j in 0..l_in {
                    fields[i * l_in + j] = perlin_octaves(seed, i as u64, j as f64, octaves);
                }
            }
            let max_abs = fields.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = if max_abs > 0.0 { amplitude / max_abs } else { 0.0 };
            for (w, f) in windows.data_mut().iter_mut().zip(&fields) {
                *w += T::cast(f * scale);
            }
        }
        NoiseSpec::Cutout { ratio, fill } => {
            let k = (ratio * l_in as f64).ceil() as usize;
            let mut rng = substream(seed, 0);
            let fill = T::cast(fill);
            for i in 0..n {
                // Partial Fisher-Yates: first k entries are a uniform
                // draw without replacement.
                let mut idx: Vec<usize> = (0..l_in).collect();
                for j in 0..k.min(l_in) {
                    let pick = rng.gen_range(j..l_in);
                    idx.swap(j, pick);
                }
                for &j in idx.iter().take(k) {
                    windows.data_mut()[i * l_in + j] = fill;
                }
            }
        }
    }
    SequenceDataset::new(windows, dataset.horizons().clone())
}

/// Octave-summed 1-d gradient noise at a (sample, position) coordinate.
/// Frequencies double and amplitudes halve per octave.
fn perlin_octaves(seed: u64, sample: u64, pos: f64, octaves: usize) -> f64 {
    let mut total = 0.0;
    for o in 0..octaves {
        let wavelength = PERLIN_BASE_WAVELENGTH / (1u64 << o) as f64;
        let amplitude = 0.5f64.powi(o as i32);
        total += amplitude * gradient_noise(seed, sample, o as u64, pos / wavelength);
    }
    total
}

/// Classic 1-d Perlin: hashed unit gradients at integer lattice points,
/// quintic-fade interpolation of the two corner ramps.
fn gradient_noise(seed: u64, sample: u64, octave: u64, x: f64) -> f64 {
    let cell = x.floor();
    let t = x - cell;
    let g0 = hashed_gradient(seed, sample, octave, cell as i64);
    let g1 = hashed_gradient(seed, sample, octave, cell as i64 + 1);
    let n0 = g0 * t;
    let n1 = g1 * (t - 1.0);
    let f = fade(t);
    n0 + f * (n1 - n0)
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Deterministic gradient in [-1, 1] from a splitmix64-style avalanche.
fn hashed_gradient(seed: u64, sample: u64, octave: u64, cell: i64) -> f64 {
    let mut z = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(sample.wrapping_mul(0xBF58476D1CE4E5B9))
        .wrapping_add(octave.wrapping_mul(0x94D049BB133111EB))
        .wrapping_add(cell as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}
