//! Controllable two-modality identity datasets, the identity-balanced batch
//! sampler, and the feature CSV interchange format.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::{LabeledBatch, Modality};
use crate::error::{Error, Result};

/// Perturbation strength of the latent modality transform.
const TRANSFORM_PERTURBATION: f64 = 0.3;

/// Controls for synthetic dataset generation. Identity `c` has a latent
/// center; visible samples scatter around it while thermal samples scatter
/// around a fixed linear transform plus offset of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_identities: usize,
    pub dim: usize,
    /// Magnitude of the thermal offset vector; 0 forces the transform to the
    /// identity as well (degenerate no-gap control).
    pub modality_offset_scale: f64,
    pub modality_transform_seed: u64,
    pub intra_identity_noise: f64,
    pub samples_per_identity_per_modality: usize,
    pub seed: u64,
    /// Identities in the training split; the rest form the held-out split.
    pub train_identities: usize,
    /// Fraction of identities whose noise is multiplied by
    /// `noise_hetero_multiplier` (heterogeneous-variation profiles).
    pub noise_hetero_fraction: f64,
    pub noise_hetero_multiplier: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_identities: 40,
            dim: 16,
            modality_offset_scale: 3.0,
            modality_transform_seed: 9001,
            intra_identity_noise: 0.4,
            samples_per_identity_per_modality: 20,
            seed: 7,
            train_identities: 30,
            noise_hetero_fraction: 0.0,
            noise_hetero_multiplier: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0
            || self.dim == 0
            || self.samples_per_identity_per_modality == 0
        {
            return Err(Error::InvalidArgument("synth spec counts must be >= 1".into()));
        }
        if self.intra_identity_noise < 0.0 || self.modality_offset_scale < 0.0 {
            return Err(Error::InvalidArgument("synth spec scales must be >= 0".into()));
        }
        if self.train_identities == 0 || self.train_identities >= self.num_identities {
            return Err(Error::InvalidArgument(format!(
                "train_identities must be in 1..{}",
                self.num_identities
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_hetero_fraction) || self.noise_hetero_multiplier < 0.0
        {
            return Err(Error::InvalidArgument("heterogeneous-noise controls out of range".into()));
        }
        Ok(())
    }
}

/// One raw synthetic observation.
#[derive(Debug, Clone)]
pub struct ToySample {
    pub input: Vec<f64>,
    pub identity: usize,
    pub modality: Modality,
}

/// Generated dataset with a by-identity train/test split (disjoint
/// identities, each split relabeled from zero).
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: Vec<ToySample>,
    pub test: Vec<ToySample>,
    pub dim: usize,
    pub num_train_identities: usize,
    pub num_test_identities: usize,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Deterministically generate a dataset from its spec (same spec, same
/// bytes). Thermal centers are `A z + b` for a seeded well-conditioned `A`
/// and an offset `b` of magnitude `modality_offset_scale`.
pub fn generate_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Array1<f64>> = (0..spec.num_identities)
        .map(|_| Array1::from_shape_fn(d, |_| normal(&mut rng)))
        .collect();

    let mut trng = ChaCha8Rng::seed_from_u64(spec.modality_transform_seed);
    let (transform, offset) = if spec.modality_offset_scale == 0.0 {
        (Array2::eye(d), Array1::zeros(d))
    } else {
        let mut a = Array2::from_shape_fn((d, d), |_| {
            TRANSFORM_PERTURBATION * normal(&mut trng)
        });
        for i in 0..d {
            a[[i, i]] += 1.0;
        }
        // Unit-normalize columns to keep the transform well conditioned.
        for j in 0..d {
            let norm: f64 = (0..d).map(|i| a[[i, j]] * a[[i, j]]).sum::<f64>().sqrt();
            for i in 0..d {
                a[[i, j]] /= norm;
            }
        }
        let mut b = Array1::from_shape_fn(d, |_| normal(&mut trng));
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        b.mapv_inplace(|v| v / norm * spec.modality_offset_scale);
        (a, b)
    };

    let noisy_count =
        (spec.noise_hetero_fraction * spec.num_identities as f64).round() as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..spec.num_identities {
        let sigma = if c < noisy_count {
            spec.intra_identity_noise * spec.noise_hetero_multiplier
        } else {
            spec.intra_identity_noise
        };
        let thermal_center = transform.dot(&centers[c]) + &offset;
        let (bucket, label) = if c < spec.train_identities {
            (&mut train, c)
        } else {
            (&mut test, c - spec.train_identities)
        };
        for _ in 0..spec.samples_per_identity_per_modality {
            let v: Vec<f64> = (0..d).map(|k| centers[c][k] + sigma * normal(&mut rng)).collect();
            bucket.push(ToySample { input: v, identity: label, modality: Modality::Visible });
        }
        for _ in 0..spec.samples_per_identity_per_modality {
            let t: Vec<f64> =
                (0..d).map(|k| thermal_center[k] + sigma * normal(&mut rng)).collect();
            bucket.push(ToySample { input: t, identity: label, modality: Modality::Thermal });
        }
    }
    Ok(SynthDataset {
        train,
        test,
        dim: d,
        num_train_identities: spec.train_identities,
        num_test_identities: spec.num_identities - spec.train_identities,
    })
}

/// Identity-balanced batch shape: C identities, a fixed number of samples per
/// modality each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchSpec {
    pub identities: usize,
    pub visible_per_identity: usize,
    pub thermal_per_identity: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec { identities: 6, visible_per_identity: 8, thermal_per_identity: 8 }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::InvalidArgument("batch needs at least 2 identities".into()));
        }
        if self.visible_per_identity == 0 || self.thermal_per_identity == 0 {
            return Err(Error::InvalidArgument("per-modality sample counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.identities * (self.visible_per_identity + self.thermal_per_identity)
    }
}

/// Draw a batch: C identities without replacement, then the per-modality
/// sample counts without replacement within each identity. Guarantees every
/// drawn identity appears in both modalities and no sample repeats.
pub fn sample_batch(
    samples: &[ToySample],
    num_identities: usize,
    spec: &BatchSpec,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledBatch<f64>> {
    spec.validate()?;
    if spec.identities > num_identities {
        return Err(Error::InvalidArgument(format!(
            "batch wants {} identities, dataset has {}",
            spec.identities, num_identities
        )));
    }
    let mut ids: Vec<usize> = (0..num_identities).collect();
    ids.shuffle(rng);
    ids.truncate(spec.identities);
    let dim = samples.first().map(|s| s.input.len()).unwrap_or(0);
    let mut rows: Vec<&ToySample> = Vec::with_capacity(spec.batch_size());
    for &c in &ids {
        for (modality, want) in [
            (Modality::Visible, spec.visible_per_identity),
            (Modality::Thermal, spec.thermal_per_identity),
        ] {
            let mut pool: Vec<&ToySample> = samples
                .iter()
                .filter(|s| s.identity == c && s.modality == modality)
                .collect();
            if pool.len() < want {
                return Err(Error::InvalidArgument(format!(
                    "identity {} has {} {:?} samples, batch wants {}",
                    c,
                    pool.len(),
                    modality,
                    want
                )));
            }
            pool.shuffle(rng);
            rows.extend(pool.into_iter().take(want));
        }
    }
    let features = Array2::from_shape_fn((rows.len(), dim), |(i, k)| rows[i].input[k]);
    LabeledBatch::new(
        features,
        rows.iter().map(|s| s.identity).collect(),
        rows.iter().map(|s| s.modality).collect(),
    )
}

/// Write samples in the feature CSV format: header `dim=<D>`, then rows
/// `<identity>,<v|t>,<f1>,...,<fD>`. LF endings, shortest round-trip floats.
pub fn write_feature_file(path: &Path, samples: &[ToySample], dim: usize) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("dim={}\n", dim));
    for s in samples {
        if s.input.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "sample has {} values, file dim is {}",
                s.input.len(),
                dim
            )));
        }
        out.push_str(&format!("{},{}", s.identity, s.modality.tag()));
        for v in &s.input {
            out.push(',');
            out.push_str(&format!("{}", v));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parse a feature CSV file into a labeled batch. Errors name the offending
/// 1-based line.
pub fn load_feature_file(path: &Path) -> Result<LabeledBatch<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_text(&text)
}

pub fn parse_feature_text(text: &str) -> Result<LabeledBatch<f64>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, message: "empty file".into() })?;
    let dim: usize = header
        .strip_prefix("dim=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("expected 'dim=<D>' header, got '{}'", header),
        })?;
    if dim == 0 {
        return Err(Error::Parse { line: 1, message: "dim must be >= 1".into() });
    }
    let mut features: Vec<f64> = Vec::new();
    let mut identities = Vec::new();
    let mut modalities = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} fields, got {}", dim + 2, fields.len()),
            });
        }
        let identity: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("bad identity '{}'", fields[0]),
        })?;
        let modality = Modality::from_tag(fields[1]).ok_or_else(|| Error::Parse {
            line: lineno,
            message: format!("unknown modality tag '{}'", fields[1]),
        })?;
        for f in &fields[2..] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad float '{}'", f),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    message: "non-finite feature value".into(),
                });
            }
            features.push(v);
        }
        identities.push(identity);
        modalities.push(modality);
    }
    if identities.is_empty() {
        return Err(Error::Parse { line: 1, message: "file has no sample rows".into() });
    }
    let n = identities.len();
    let features = Array2::from_shape_vec((n, dim), features)
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    LabeledBatch::new(features, identities, modalities)
}

/// Convert a labeled batch back into toy samples (for round-trip writes).
pub fn batch_to_samples(batch: &LabeledBatch<f64>) -> Vec<ToySample> {
    (0..batch.len())
        .map(|i| ToySample {
            input: batch.features.row(i).to_vec(),
            identity: batch.identities[i],
            modality: batch.modalities[i],
        })
        .collect()
}
