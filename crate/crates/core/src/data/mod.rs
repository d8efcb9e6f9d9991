//! Vibration-signal plumbing: segmentation of raw records into 4096-sample
//! windows, 64x64 imaging with per-segment standardization, optional FFT
//! magnitude preprocessing, and episodic N-way K-shot sampling.

pub mod corpus;
pub mod synth;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

pub const SEGMENT_LEN: usize = 4096;
/// Per-channel window in two-channel mode; two windows concatenate to a segment.
pub const CHANNEL_WINDOW: usize = 2048;
pub const IMAGE_SIDE: usize = 64;
pub const DEFAULT_STRIDE: usize = 2048;
pub const STANDARDIZE_EPS: f64 = 1e-8;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest {path}: {source}")]
    Manifest {
        path: String,
        source: serde_json::Error,
    },
    #[error("checksum mismatch for {path}")]
    ChecksumMismatch { path: String },
    #[error("class {label} ({code}) produced zero segments")]
    EmptyClass { label: usize, code: String },
    #[error("record has no channels")]
    NoChannels,
    #[error("channels have unequal lengths")]
    UnequalChannels,
    #[error("channel length {have} shorter than window {need}")]
    ChannelTooShort { have: usize, need: usize },
    #[error("stride must be positive")]
    ZeroStride,
    #[error("class {label} not present in the corpus")]
    UnknownClass { label: usize },
    #[error("class {label} pool too small: need {need} segments, have {have}")]
    PoolTooSmall {
        label: usize,
        need: usize,
        have: usize,
    },
    #[error("bad episode spec: {0}")]
    BadSpec(String),
}

/// Fault taxonomy of one record (Tables-style metadata).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordMeta {
    pub location: String,
    pub cause: String,
    pub severity: u8,
    pub condition: String,
}

/// One raw multi-channel vibration capture with a single fault label.
#[derive(Clone, Debug)]
pub struct SignalRecord {
    pub channels: Vec<Vec<f32>>,
    pub sample_rate_hz: f64,
    pub fault_class: usize,
    pub meta: RecordMeta,
}

/// Identity of a segment inside its corpus: which record, and the offset of
/// its window. Used for support/query disjointness audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SegmentSource {
    pub record: usize,
    pub offset: usize,
}

#[derive(Clone, Debug)]
pub struct Segment {
    pub values: Vec<f32>,
    pub fault_class: usize,
    pub source: SegmentSource,
}

/// Cuts a record into 4096-sample segments.
///
/// With two or more channels, each segment concatenates a 2048-sample window
/// from the first channel and the same-offset window from the second; with a
/// single channel the whole 4096 samples come from it. Offsets advance by
/// `stride`; the tail that does not fill a window is discarded.
pub fn segment_record(
    record: &SignalRecord,
    record_id: usize,
    stride: usize,
) -> Result<Vec<Segment>, DataError> {
    if stride == 0 {
        return Err(DataError::ZeroStride);
    }
    if record.channels.is_empty() {
        return Err(DataError::NoChannels);
    }
    let len = record.channels[0].len();
    if record.channels.iter().any(|c| c.len() != len) {
        return Err(DataError::UnequalChannels);
    }
    let two_channel = record.channels.len() >= 2;
    let window = if two_channel { CHANNEL_WINDOW } else { SEGMENT_LEN };
    if len < window {
        return Err(DataError::ChannelTooShort { have: len, need: window });
    }

    let mut segments = Vec::with_capacity((len - window) / stride + 1);
    let mut offset = 0;
    while offset + window <= len {
        let mut values = Vec::with_capacity(SEGMENT_LEN);
        if two_channel {
            values.extend_from_slice(&record.channels[0][offset..offset + window]);
            values.extend_from_slice(&record.channels[1][offset..offset + window]);
        } else {
            values.extend_from_slice(&record.channels[0][offset..offset + window]);
        }
        segments.push(Segment {
            values,
            fault_class: record.fault_class,
            source: SegmentSource { record: record_id, offset },
        });
        offset += stride;
    }
    Ok(segments)
}

/// Maps a segment to a standardized 64x64 image, row-major: pixel (r, c) is
/// `values[64r + c]`, then the whole image is shifted/scaled to zero mean and
/// unit variance with an epsilon guard for (near-)constant segments.
pub fn to_image(values: &[f32]) -> Vec<f32> {
    assert_eq!(values.len(), SEGMENT_LEN, "segment must hold 4096 values");
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv_std = 1.0 / (var + STANDARDIZE_EPS).sqrt();
    values
        .iter()
        .map(|&v| ((v as f64 - mean) * inv_std) as f32)
        .collect()
}

/// Full two-sided magnitude spectrum: output[k] = |X_k| for every bin, so the
/// length (and the 64x64 mapping downstream) is unchanged.
pub fn fft_magnitude_values(values: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(values.len()).process(&mut buf);
    buf.iter().map(|c| c.norm()).collect()
}

/// Replaces a segment's samples with their 4096-point DFT magnitudes.
pub fn fft_magnitude(segment: &Segment) -> Segment {
    let input: Vec<f64> = segment.values.iter().map(|&v| v as f64).collect();
    let values = fft_magnitude_values(&input)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    Segment {
        values,
        fault_class: segment.fault_class,
        source: segment.source,
    }
}

/// Per-class segment pools, keyed by original class label.
#[derive(Clone, Debug, Default)]
pub struct SegmentPools {
    classes: BTreeMap<usize, Vec<Segment>>,
}

impl SegmentPools {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, segment: Segment) {
        self.classes.entry(segment.fault_class).or_default().push(segment);
    }

    pub fn labels(&self) -> Vec<usize> {
        self.classes.keys().copied().collect()
    }

    pub fn pool(&self, label: usize) -> Option<&[Segment]> {
        self.classes.get(&label).map(|v| v.as_slice())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Smallest pool size among `labels`.
    pub fn min_pool_len(&self, labels: &[usize]) -> Result<usize, DataError> {
        labels
            .iter()
            .map(|&l| {
                self.pool(l)
                    .map(|p| p.len())
                    .ok_or(DataError::UnknownClass { label: l })
            })
            .try_fold(usize::MAX, |acc, r| r.map(|n| acc.min(n)))
    }

    /// Keeps only the listed classes; unknown labels are an error.
    pub fn restrict_classes(&self, labels: &[usize]) -> Result<SegmentPools, DataError> {
        let mut out = SegmentPools::new();
        for &label in labels {
            let pool = self
                .classes
                .get(&label)
                .ok_or(DataError::UnknownClass { label })?;
            out.classes.insert(label, pool.clone());
        }
        Ok(out)
    }

    /// Keeps `per_class` randomly chosen segments in every pool (seeded,
    /// without replacement), modelling a small training set.
    pub fn subsample(&self, per_class: usize, seed: u64) -> Result<SegmentPools, DataError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = SegmentPools::new();
        for (&label, pool) in &self.classes {
            if pool.len() < per_class {
                return Err(DataError::PoolTooSmall {
                    label,
                    need: per_class,
                    have: pool.len(),
                });
            }
            let mut picks: Vec<usize> =
                rand::seq::index::sample(&mut rng, pool.len(), per_class).into_vec();
            picks.sort_unstable();
            out.classes
                .insert(label, picks.into_iter().map(|i| pool[i].clone()).collect());
        }
        Ok(out)
    }
}

/// Shape of one few-shot task.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub query_per_class: usize,
    pub class_pool: Vec<usize>,
}

/// One imaged sample of an episode, with its episode-local label.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Vec<f32>,
    pub label: usize,
    pub source: SegmentSource,
}

#[derive(Clone, Debug)]
pub struct EpisodeBatch {
    pub support: Vec<Example>,
    /// Original class label per episode label 0..N-1.
    pub class_map: Vec<usize>,
    pub query: Vec<Example>,
}

/// Draws one N-way K-shot episode: N classes without replacement from the
/// spec's class pool, then K support + Q query segments per class without
/// replacement. Original labels are remapped to 0..N-1 in drawn order.
/// Deterministic given (pools, spec, seed).
pub fn sample_episode(
    pools: &SegmentPools,
    spec: &EpisodeSpec,
    seed: u64,
) -> Result<EpisodeBatch, DataError> {
    if spec.n_way == 0 || spec.k_shot == 0 || spec.query_per_class == 0 {
        return Err(DataError::BadSpec(
            "n_way, k_shot and query_per_class must be positive".into(),
        ));
    }
    if spec.n_way > spec.class_pool.len() {
        return Err(DataError::BadSpec(format!(
            "cannot draw {} ways from {} classes",
            spec.n_way,
            spec.class_pool.len()
        )));
    }
    for &label in &spec.class_pool {
        if pools.pool(label).is_none() {
            return Err(DataError::UnknownClass { label });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drawn: Vec<usize> = rand::seq::index::sample(&mut rng, spec.class_pool.len(), spec.n_way)
        .into_iter()
        .map(|i| spec.class_pool[i])
        .collect();

    let per_class = spec.k_shot + spec.query_per_class;
    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut query = Vec::with_capacity(spec.n_way * spec.query_per_class);
    for (episode_label, &label) in drawn.iter().enumerate() {
        let pool = pools.pool(label).expect("label presence checked above");
        if pool.len() < per_class {
            return Err(DataError::PoolTooSmall {
                label,
                need: per_class,
                have: pool.len(),
            });
        }
        let picks = rand::seq::index::sample(&mut rng, pool.len(), per_class);
        for (j, i) in picks.into_iter().enumerate() {
            let segment = &pool[i];
            let example = Example {
                image: to_image(&segment.values),
                label: episode_label,
                source: segment.source,
            };
            if j < spec.k_shot {
                support.push(example);
            } else {
                query.push(example);
            }
        }
    }
    Ok(EpisodeBatch { support, class_map: drawn, query })
}
