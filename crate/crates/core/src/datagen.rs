//! Seeded synthetic process: per-channel AR(1) latents mixed across channels,
//! with four injectable fault families.
//!
//! Each run draws its innovations from one stream and any fault randomness
//! from a second, so the rows before onset match a normal run bit for bit.

use crate::error::{invalid, Result};
use crate::numerics::{derive_seed, Matrix, Scalar, SeededRng};
use crate::preprocess::RawSeries;

pub const DEFAULT_CHANNELS: usize = 12;
pub const DEFAULT_RUN_LENGTH: usize = 240;
pub const TRAIN_ONSET: usize = 20;
pub const TEST_ONSET: usize = 160;
/// Run length at which the test onset reaches [`TEST_ONSET`].
pub const TEST_RUN_LENGTH: usize = 960;
/// Chance that a stuck channel keeps its held value at a step.
pub const STICK_PROBABILITY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaultFamily {
    Step,
    RandomVariation,
    SlowDrift,
    Sticking,
}

impl FaultFamily {
    pub const ALL: [FaultFamily; 4] = [
        FaultFamily::Step,
        FaultFamily::RandomVariation,
        FaultFamily::SlowDrift,
        FaultFamily::Sticking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultFamily::Step => "step",
            FaultFamily::RandomVariation => "random_variation",
            FaultFamily::SlowDrift => "slow_drift",
            FaultFamily::Sticking => "sticking",
        }
    }

    /// Magnitude used by [`fault_assignment`] for the first class of a family.
    pub fn default_magnitude(self) -> f64 {
        match self {
            FaultFamily::Step => 2.0,
            FaultFamily::RandomVariation => 2.0,
            FaultFamily::SlowDrift => 16.0,
            FaultFamily::Sticking => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessSpec {
    pub ar: Vec<f64>,
    pub mean: Vec<f64>,
    pub noise_std: Vec<f64>,
    /// d×d with unit-length rows; observed = mixing · latent.
    pub mixing: Matrix<f64>,
    pub seed: u64,
}

impl ProcessSpec {
    /// Random process with AR coefficients in [0.3, 0.8], means in [-2, 2],
    /// noise std in [0.5, 1.5] and a diagonally dominant mixing matrix.
    pub fn random(channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(invalid("process needs at least one channel"));
        }
        let mut rng = SeededRng::new(seed).fork(0x5052_4f43);
        let ar = (0..channels).map(|_| rng.uniform(0.3, 0.8)).collect();
        let mean = (0..channels).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let noise_std = (0..channels).map(|_| rng.uniform(0.5, 1.5)).collect();
        let raw = Matrix::from_fn(channels, channels, |r, c| {
            if r == c {
                1.0
            } else {
                0.3 * rng.normal()
            }
        });
        let spec = ProcessSpec {
            ar,
            mean,
            noise_std,
            mixing: normalize_rows(raw),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn channels(&self) -> usize {
        self.ar.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.ar.len();
        if d == 0 || self.mean.len() != d || self.noise_std.len() != d {
            return Err(invalid("process parameter vectors must share a non-zero length"));
        }
        if self.mixing.rows() != d || self.mixing.cols() != d {
            return Err(invalid("mixing matrix must be d×d"));
        }
        if self.ar.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(invalid("AR coefficients must lie in (0, 1)"));
        }
        if self.noise_std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(invalid("noise std must be positive"));
        }
        Ok(())
    }
}

fn normalize_rows(mut m: Matrix<f64>) -> Matrix<f64> {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultSpec {
    pub family: FaultFamily,
    pub channels: Vec<usize>,
    pub magnitude: f64,
    /// First faulty row.
    pub onset: usize,
    /// Label written from onset on.
    pub class_id: usize,
}

impl FaultSpec {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.onset < 1 {
            return Err(invalid("fault onset must be at least 1"));
        }
        if !(self.magnitude > 0.0) || !self.magnitude.is_finite() {
            return Err(invalid("fault magnitude must be positive"));
        }
        if self.channels.is_empty() || self.channels.iter().any(|&c| c >= channels) {
            return Err(invalid(format!("fault channels must be a non-empty subset of 0..{channels}")));
        }
        if self.class_id == 0 {
            return Err(invalid("class 0 is reserved for normal operation"));
        }
        Ok(())
    }
}

/// One run of `length` rows. Labels are 0 before the fault onset and the
/// fault's class id from the onset on.
pub fn generate<T: Scalar>(
    spec: &ProcessSpec,
    fault: Option<&FaultSpec>,
    length: usize,
    run_seed: u64,
) -> Result<RawSeries<T>> {
    spec.validate()?;
    let d = spec.channels();
    if length == 0 {
        return Err(invalid("run length must be positive"));
    }
    if let Some(f) = fault {
        f.validate(d)?;
        if f.onset >= length {
            return Err(invalid(format!("onset {} not before run end {length}", f.onset)));
        }
    }
    let base = SeededRng::new(run_seed);
    let mut noise = base.fork(1);
    let mut fault_rng = base.fork(2);
    let affected: Vec<bool> = (0..d)
        .map(|c| fault.is_some_and(|f| f.channels.contains(&c)))
        .collect();

    let mut latent: Vec<f64> = (0..d)
        .map(|j| spec.mean[j] + spec.noise_std[j] / (1.0 - spec.ar[j] * spec.ar[j]).sqrt() * noise.normal())
        .collect();
    let mut held = vec![0.0; d];
    let mut values = Vec::with_capacity(length * d);
    let mut labels = Vec::with_capacity(length);
    for t in 0..length {
        let faulty = fault.filter(|f| t >= f.onset);
        if t > 0 {
            for j in 0..d {
                let mut std = spec.noise_std[j];
                if let Some(f) = faulty {
                    if f.family == FaultFamily::RandomVariation && affected[j] {
                        std *= 1.0 + f.magnitude;
                    }
                }
                latent[j] = spec.mean[j] + spec.ar[j] * (latent[j] - spec.mean[j]) + std * noise.normal();
            }
        }
        let mut observed = spec.mixing.matvec(&latent)?;
        if let Some(f) = faulty {
            for j in (0..d).filter(|&j| affected[j]) {
                match f.family {
                    FaultFamily::Step => observed[j] += f.magnitude,
                    FaultFamily::SlowDrift => observed[j] += f.magnitude * (t - f.onset) as f64 / length as f64,
                    FaultFamily::Sticking => {
                        if t == f.onset || !fault_rng.bernoulli(STICK_PROBABILITY) {
                            held[j] = observed[j];
                        }
                        observed[j] = held[j];
                    }
                    FaultFamily::RandomVariation => {}
                }
            }
        }
        values.extend(observed.into_iter().map(T::lit));
        labels.push(faulty.map_or(0, |f| f.class_id));
    }
    let classes = fault.map_or(1, |f| f.class_id + 1);
    RawSeries::new(Matrix::from_vec(length, d, values)?, labels, classes)
}

/// Fault template of one class: everything but the onset.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultTemplate {
    pub class_id: usize,
    pub family: FaultFamily,
    pub channels: Vec<usize>,
    pub magnitude: f64,
}

/// Channels hit by each fault class.
pub const AFFECTED_CHANNELS: usize = 3;

/// Class `c >= 1` gets family `(c - 1) mod 4` in the order step,
/// random_variation, slow_drift, sticking. Each further cycle through the
/// families scales the magnitude by 1.5. Affected channels are drawn per class
/// from the process seed.
pub fn fault_assignment(spec: &ProcessSpec, class_count: usize) -> Result<Vec<FaultTemplate>> {
    if class_count < 2 {
        return Err(invalid("benchmark needs normal plus at least one fault class"));
    }
    let d = spec.channels();
    let k = AFFECTED_CHANNELS.min(d);
    Ok((1..class_count)
        .map(|c| {
            let family = FaultFamily::ALL[(c - 1) % 4];
            let cycle = ((c - 1) / 4) as i32;
            let mut rng = SeededRng::new(derive_seed(spec.seed, 0x4641_0000 + c as u64));
            let mut channels = rng.sample_indices(d, k);
            channels.sort_unstable();
            FaultTemplate {
                class_id: c,
                family,
                channels,
                magnitude: family.default_magnitude() * 1.5f64.powi(cycle),
            }
        })
        .collect())
}

/// Test-run onset: [`TEST_ONSET`] for runs of [`TEST_RUN_LENGTH`] or more,
/// otherwise `max(2, length / 6)`.
pub fn test_onset(length: usize) -> usize {
    if length >= TEST_RUN_LENGTH {
        TEST_ONSET
    } else {
        (length / 6).max(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub class_count: usize,
    /// Runs per class.
    pub train_runs: usize,
    pub test_runs: usize,
    pub run_length: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            class_count: 5,
            train_runs: 40,
            test_runs: 10,
            run_length: DEFAULT_RUN_LENGTH,
            seed: 0,
        }
    }
}

/// Train and test series, each the concatenation of `runs` runs per class in
/// class order. Every run has its own derived seed.
pub fn generate_benchmark<T: Scalar>(
    spec: &ProcessSpec,
    config: &BenchmarkConfig,
) -> Result<(RawSeries<T>, RawSeries<T>)> {
    let faults = fault_assignment(spec, config.class_count)?;
    if config.train_runs == 0 || config.test_runs == 0 {
        return Err(invalid("train and test run counts must be positive"));
    }
    if config.run_length <= TRAIN_ONSET {
        return Err(invalid(format!("run length must exceed the train onset {TRAIN_ONSET}")));
    }
    let build = |split: u64, runs: usize, onset: usize| -> Result<RawSeries<T>> {
        let d = spec.channels();
        let mut values = Vec::with_capacity(config.class_count * runs * config.run_length * d);
        let mut labels = Vec::with_capacity(config.class_count * runs * config.run_length);
        for c in 0..config.class_count {
            let fault = (c > 0).then(|| {
                let t = &faults[c - 1];
                FaultSpec {
                    family: t.family,
                    channels: t.channels.clone(),
                    magnitude: t.magnitude,
                    onset,
                    class_id: c,
                }
            });
            for r in 0..runs {
                let run_seed = derive_seed(config.seed, (split << 48) | ((c as u64) << 24) | r as u64);
                let run = generate::<T>(spec, fault.as_ref(), config.run_length, run_seed)?;
                values.extend_from_slice(run.values().data());
                labels.extend_from_slice(run.labels());
            }
        }
        let rows = labels.len();
        RawSeries::new(Matrix::from_vec(rows, d, values)?, labels, config.class_count)
    };
    let train = build(1, config.train_runs, TRAIN_ONSET)?;
    let test = build(2, config.test_runs, test_onset(config.run_length))?;
    Ok((train, test))
}
