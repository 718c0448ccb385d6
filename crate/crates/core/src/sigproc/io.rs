//! `<name>.meta.json` header plus `<name>.f32` channel-major little-endian
//! blob, for both continuous recordings and epoch tensors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ContinuousRecording, EpochTensor, Event};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Header {
    Recording {
        version: u32,
        fs: f64,
        channels: Vec<String>,
        n_samples: usize,
        events: Vec<Event>,
    },
    Epochs {
        version: u32,
        fs: f64,
        t0_ms: f64,
        channels: Vec<String>,
        n_trials: usize,
        n_samples: usize,
        labels: Vec<u8>,
        command_codes: Vec<u8>,
        blocks: Vec<usize>,
    },
}

/// Strip a trailing `.meta.json` or `.f32` so either file names the pair.
pub fn base_path(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    for ext in [".meta.json", ".f32"] {
        if let Some(stem) = s.strip_suffix(ext) {
            return PathBuf::from(stem);
        }
    }
    path.to_path_buf()
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn meta_path(base: &Path) -> PathBuf {
    with_suffix(base, ".meta.json")
}

pub fn blob_path(base: &Path) -> PathBuf {
    with_suffix(base, ".f32")
}

fn encode(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn decode(bytes: &[u8], expected: usize, path: &Path) -> Result<Vec<f64>> {
    if bytes.len() != expected * 4 {
        return Err(Error::validation(
            path.display().to_string(),
            format!("blob holds {} bytes, header implies {}", bytes.len(), expected * 4),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

fn write_pair(base: &Path, header: &Header, blob: Vec<u8>) -> Result<()> {
    fs::write(meta_path(base), serde_json::to_vec_pretty(header)?)?;
    fs::write(blob_path(base), blob)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<Header> {
    let base = base_path(path);
    let text = fs::read(meta_path(&base))?;
    serde_json::from_slice(&text).map_err(|e| Error::validation(meta_path(&base).display().to_string(), e.to_string()))
}

pub fn write_recording(rec: &ContinuousRecording, path: &Path) -> Result<()> {
    let base = base_path(path);
    let header = Header::Recording {
        version: FORMAT_VERSION,
        fs: rec.fs,
        channels: rec.channels.clone(),
        n_samples: rec.n_samples(),
        events: rec.events.clone(),
    };
    write_pair(&base, &header, encode(rec.data.iter().flatten().copied()))
}

pub fn read_recording(path: &Path) -> Result<ContinuousRecording> {
    let base = base_path(path);
    let Header::Recording {
        version,
        fs: rate,
        channels,
        n_samples,
        events,
    } = read_header(&base)?
    else {
        return Err(Error::validation("kind", "expected a recording"));
    };
    check_version(version)?;
    let blob = fs::read(blob_path(&base))?;
    let flat = decode(&blob, channels.len() * n_samples, &blob_path(&base))?;
    let data = if n_samples == 0 {
        vec![Vec::new(); channels.len()]
    } else {
        flat.chunks(n_samples).map(<[f64]>::to_vec).collect()
    };
    ContinuousRecording::new(rate, channels, data, events)
}

pub fn write_epochs(e: &EpochTensor, path: &Path) -> Result<()> {
    let base = base_path(path);
    let header = Header::Epochs {
        version: FORMAT_VERSION,
        fs: e.fs,
        t0_ms: e.t0_ms,
        channels: e.channels.clone(),
        n_trials: e.n_trials,
        n_samples: e.n_samples,
        labels: e.labels.clone(),
        command_codes: e.command_codes.clone(),
        blocks: e.blocks.clone(),
    };
    write_pair(&base, &header, encode(e.data.iter().copied()))
}

pub fn read_epochs(path: &Path) -> Result<EpochTensor> {
    let base = base_path(path);
    let Header::Epochs {
        version,
        fs: rate,
        t0_ms,
        channels,
        n_trials,
        n_samples,
        labels,
        command_codes,
        blocks,
    } = read_header(&base)?
    else {
        return Err(Error::validation("kind", "expected epochs"));
    };
    check_version(version)?;
    let blob = fs::read(blob_path(&base))?;
    let data = decode(&blob, n_trials * channels.len() * n_samples, &blob_path(&base))?;
    let e = EpochTensor {
        n_trials,
        n_channels: channels.len(),
        n_samples,
        data,
        labels,
        command_codes,
        blocks,
        fs: rate,
        t0_ms,
        channels,
    };
    e.validate()?;
    Ok(e)
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::validation("version", format!("unsupported version {v}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_recording() -> ContinuousRecording {
        let data = vec![vec![0.5, -1.25, 3.0, 4.0], vec![1.0, 2.0, -3.5, 0.0]];
        let events = vec![Event { sample: 1, command: 3, is_target: true, block: 0 }];
        ContinuousRecording::new(512.0, vec!["Pz".into(), "Oz".into()], data, events).unwrap()
    }

    #[test]
    fn recording_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = sample_recording();
        write_recording(&rec, &dir.path().join("s1")).unwrap();
        let back = read_recording(&dir.path().join("s1.meta.json")).unwrap();
        assert_eq!(back, rec);
        let raw = fs::read(dir.path().join("s1.f32")).unwrap();
        assert_eq!(raw.len(), 8 * 4);
        assert_eq!(f32::from_le_bytes([raw[4], raw[5], raw[6], raw[7]]), -1.25);
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_recording(&sample_recording(), &dir.path().join("s1")).unwrap();
        let p = dir.path().join("s1.f32");
        let raw = fs::read(&p).unwrap();
        fs::write(&p, &raw[..raw.len() - 4]).unwrap();
        assert!(matches!(read_recording(&p), Err(Error::Validation { .. })));
    }

    #[test]
    fn epochs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = sample_recording();
        let e = super::super::segment(&rec, 0.0, 4.0, None).unwrap();
        write_epochs(&e, &dir.path().join("ep")).unwrap();
        assert_eq!(read_epochs(&dir.path().join("ep")).unwrap(), e);
        assert!(read_recording(&dir.path().join("ep")).is_err());
    }

    #[test]
    fn missing_file_is_io() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_recording(&dir.path().join("nope")).unwrap_err();
        assert_eq!(err.category(), crate::ErrorCategory::Io);
    }
}
