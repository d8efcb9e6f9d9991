//! The on-disk corpus container: a directory with `manifest.json` plus raw
//! little-endian f32 sample files (one per channel per record), each guarded
//! by a CRC32 recorded in the manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{
    default_conditions, synth_fault_signal, SynthClassSpec, SAMPLE_RATE_HZ,
};
use super::{fft_magnitude, segment_record, DataError, RecordMeta, SegmentPools, SignalRecord};
use crate::seeds::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preprocess {
    None,
    Fft,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub sample_rate_hz: f64,
    pub preprocess: Preprocess,
    pub channel_order: Vec<String>,
    pub stride: usize,
    pub classes: Vec<ManifestClass>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestClass {
    pub label: usize,
    pub code: String,
    pub location: String,
    pub cause: String,
    pub severity: u8,
    pub files: Vec<ManifestRecord>,
}

/// One capture: a file per channel, in manifest channel order.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub condition: String,
    pub channels: Vec<ManifestFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub path: String,
    pub crc32: u32,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

fn read_raw_f32(path: &Path, expect_crc: u32) -> Result<Vec<f32>, DataError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if crc32fast::hash(&bytes) != expect_crc {
        return Err(DataError::ChecksumMismatch { path: path.display().to_string() });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}

fn write_raw_f32(path: &Path, values: &[f32]) -> Result<u32, DataError> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, &bytes).map_err(|e| io_err(path, e))?;
    Ok(crc32fast::hash(&bytes))
}

/// Loads a corpus: validates the manifest, checks every file's CRC, segments
/// each record with the manifest stride, applies FFT magnitude when asked,
/// and pools the segments per class.
pub fn load_corpus(manifest_path: &Path) -> Result<(SegmentPools, Manifest), DataError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| DataError::Manifest {
        path: manifest_path.display().to_string(),
        source,
    })?;
    if manifest.stride == 0 {
        return Err(DataError::ZeroStride);
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut pools = SegmentPools::new();
    let mut record_id = 0usize;
    for class in &manifest.classes {
        let mut produced = 0usize;
        for rec in &class.files {
            let channels = rec
                .channels
                .iter()
                .map(|f| read_raw_f32(&base.join(&f.path), f.crc32))
                .collect::<Result<Vec<_>, _>>()?;
            let record = SignalRecord {
                channels,
                sample_rate_hz: manifest.sample_rate_hz,
                fault_class: class.label,
                meta: RecordMeta {
                    location: class.location.clone(),
                    cause: class.cause.clone(),
                    severity: class.severity,
                    condition: rec.condition.clone(),
                },
            };
            for segment in segment_record(&record, record_id, manifest.stride)? {
                let segment = match manifest.preprocess {
                    Preprocess::None => segment,
                    Preprocess::Fft => fft_magnitude(&segment),
                };
                pools.insert(segment);
                produced += 1;
            }
            record_id += 1;
        }
        if produced == 0 {
            return Err(DataError::EmptyClass { label: class.label, code: class.code.clone() });
        }
    }
    Ok((pools, manifest))
}

#[derive(Clone, Debug)]
pub struct SynthCorpusOptions {
    pub name: String,
    pub records_per_class: usize,
    /// Samples per record; with the default stride each record yields
    /// `(duration - 2048) / stride + 1` two-channel segments.
    pub duration: usize,
    pub stride: usize,
    pub preprocess: Preprocess,
}

impl Default for SynthCorpusOptions {
    fn default() -> Self {
        SynthCorpusOptions {
            name: "synthetic-bearing".to_string(),
            records_per_class: 2,
            duration: 20_480,
            stride: super::DEFAULT_STRIDE,
            preprocess: Preprocess::None,
        }
    }
}

/// Emits a synthetic corpus in the container format and returns the manifest
/// path. Record seeds derive from `seed` per (class, record), so the corpus
/// is reproducible byte for byte.
pub fn write_synth_corpus(
    dir: &Path,
    classes: &[SynthClassSpec],
    opts: &SynthCorpusOptions,
    seed: u64,
) -> Result<PathBuf, DataError> {
    let conditions = default_conditions();
    let channel_order = ["accel_a", "accel_b"];
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let mut manifest_classes = Vec::with_capacity(classes.len());
    for class in classes {
        let class_dir = dir.join(&class.code);
        std::fs::create_dir_all(&class_dir).map_err(|e| io_err(&class_dir, e))?;
        let mut files = Vec::with_capacity(opts.records_per_class);
        for r in 0..opts.records_per_class {
            let condition = &conditions[r % conditions.len()];
            let record = synth_fault_signal(
                class.kind,
                class.pattern,
                class.severity,
                condition,
                opts.duration,
                class.label,
                mix_seed(seed, class.label as u64, r as u64),
            );
            let mut channels = Vec::with_capacity(record.channels.len());
            for (ch, values) in channel_order.iter().zip(&record.channels) {
                let rel = format!("{}/rec{r:02}_{ch}.raw", class.code);
                let crc = write_raw_f32(&dir.join(&rel), values)?;
                channels.push(ManifestFile { path: rel, crc32: crc });
            }
            files.push(ManifestRecord { condition: condition.name.clone(), channels });
        }
        manifest_classes.push(ManifestClass {
            label: class.label,
            code: class.code.clone(),
            location: match class.kind {
                super::synth::FaultKind::Healthy => "none",
                super::synth::FaultKind::Ball => "ball",
                super::synth::FaultKind::Inner => "inner race",
                super::synth::FaultKind::Outer => "outer race",
            }
            .to_string(),
            cause: match class.pattern {
                super::synth::DamagePattern::Punctual => "punctual",
                super::synth::DamagePattern::Distributed => "distributed",
            }
            .to_string(),
            severity: class.severity,
            files,
        });
    }

    let manifest = Manifest {
        name: opts.name.clone(),
        sample_rate_hz: SAMPLE_RATE_HZ,
        preprocess: opts.preprocess,
        channel_order: channel_order.iter().map(|s| s.to_string()).collect(),
        stride: opts.stride,
        classes: manifest_classes,
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text).map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest_path)
}
