//! Feature-frame "audio" clips and the `EDAU` binary file format.
//!
//! Layout (little-endian): `b"EDAU"`, `u32` frame_count, `u32` feature_dim,
//! then `frame_count * feature_dim` `f32` values, row-major by frame.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EDAU";

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    feature_dim: usize,
    data: Vec<f32>,
}

impl AudioClip {
    pub fn from_flat(feature_dim: usize, data: Vec<f32>) -> Result<Self> {
        if feature_dim == 0 || data.is_empty() || data.len() % feature_dim != 0 {
            return Err(Error::InvalidField {
                field: "audio".into(),
                reason: format!(
                    "{} values do not form whole frames of dimension {feature_dim}",
                    data.len()
                ),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { feature_dim, data })
    }

    pub fn from_frames(frames: &[Vec<f32>]) -> Result<Self> {
        let dim = frames.first().map_or(0, Vec::len);
        if let Some(bad) = frames.iter().find(|f| f.len() != dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                got: bad.len(),
            });
        }
        Self::from_flat(dim, frames.concat())
    }

    pub fn zeros(frame_count: usize, feature_dim: usize) -> Self {
        Self {
            feature_dim,
            data: vec![0.0; frame_count * feature_dim],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn frame_count(&self) -> usize {
        self.data.len() / self.feature_dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frame_count(), self.feature_dim)
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.feature_dim)
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    /// Mean of squared entries, i.e. per-frame power averaged over frames.
    pub fn mean_power(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / self.data.len() as f64
    }

    pub fn mean_frame(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.feature_dim];
        for frame in self.frames() {
            for (a, &v) in acc.iter_mut().zip(frame) {
                *a += v as f64;
            }
        }
        let n = self.frame_count() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Copy with frames `[start, start + len)` zero-filled (clamped to the clip).
    pub fn with_window_zeroed(&self, start: usize, len: usize) -> Self {
        let mut out = self.clone();
        let end = (start + len).min(self.frame_count());
        for v in &mut out.data[start.min(end) * self.feature_dim..end * self.feature_dim] {
            *v = 0.0;
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.frame_count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.feature_dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err("missing EDAU header".into());
        }
        let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != frames * dim * 4 {
            return Err(format!(
                "expected {} payload bytes for {frames}x{dim}, found {}",
                frames * dim * 4,
                body.len()
            ));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        AudioClip::from_flat(dim, data).map_err(|e| e.to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Source of audio clips by reference path.
pub trait AudioLoader: Sync {
    fn load(&self, path: &Path) -> Result<AudioClip>;
}

/// Reads `EDAU` files, resolving relative references against a base directory.
#[derive(Debug, Clone)]
pub struct FileLoader {
    base: PathBuf,
}

impl FileLoader {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        Self { base: base.into() }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base.join(path)
        }
    }
}

impl AudioLoader for FileLoader {
    fn load(&self, path: &Path) -> Result<AudioClip> {
        let full = self.resolve(path);
        let bytes = fs::read(&full).map_err(|e| Error::AudioLoadFailure {
            path: full.clone(),
            reason: e.to_string(),
        })?;
        AudioClip::from_bytes(&bytes).map_err(|reason| Error::AudioLoadFailure { path: full, reason })
    }
}

/// In-memory clips keyed by reference path.
#[derive(Debug, Clone, Default)]
pub struct MemoryLoader {
    clips: HashMap<PathBuf, AudioClip>,
}

impl MemoryLoader {
    pub fn insert(&mut self, path: impl Into<PathBuf>, clip: AudioClip) {
        self.clips.insert(path.into(), clip);
    }
}

impl AudioLoader for MemoryLoader {
    fn load(&self, path: &Path) -> Result<AudioClip> {
        self.clips
            .get(path)
            .cloned()
            .ok_or_else(|| Error::AudioLoadFailure {
                path: path.to_path_buf(),
                reason: "no such clip".into(),
            })
    }
}

/// Wraps another loader and records every path it is asked for.
pub struct RecordingLoader<L> {
    inner: L,
    seen: Mutex<Vec<PathBuf>>,
}

impl<L: AudioLoader> RecordingLoader<L> {
    pub fn new(inner: L) -> Self {
        Self {
            inner,
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn accessed(&self) -> Vec<PathBuf> {
        self.seen.lock().unwrap().clone()
    }

    pub fn clear(&self) {
        self.seen.lock().unwrap().clear();
    }
}

impl<L: AudioLoader> AudioLoader for RecordingLoader<L> {
    fn load(&self, path: &Path) -> Result<AudioClip> {
        self.seen.lock().unwrap().push(path.to_path_buf());
        self.inner.load(path)
    }
}

/// Cosine similarity between one frame and a template vector.
pub fn cosine(frame: &[f32], template: &[f64]) -> f64 {
    let dot: f64 = frame.iter().zip(template).map(|(&a, &b)| a as f64 * b).sum();
    let na: f64 = frame.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = template.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_bit_exact() {
        let clip = AudioClip::from_frames(&[vec![1.0, -2.0], vec![0.5, 0.25]]).unwrap();
        let bytes = clip.to_bytes();
        assert_eq!(&bytes[..4], b"EDAU");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[16..20], &(-2.0f32).to_le_bytes());
        assert_eq!(bytes.len(), 12 + 16);
        assert_eq!(AudioClip::from_bytes(&bytes).unwrap(), clip);
    }

    #[test]
    fn truncated_payload_rejected() {
        let clip = AudioClip::zeros(3, 2);
        let bytes = clip.to_bytes();
        assert!(AudioClip::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(AudioClip::from_bytes(b"WAVE\0\0\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn ragged_frames_rejected() {
        let err = AudioClip::from_frames(&[vec![1.0, 2.0], vec![1.0]]).unwrap_err();
        assert!(matches!(err, Error::DimMismatch { .. }));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            AudioClip::from_flat(2, vec![1.0, f32::NAN]),
            Err(Error::NonFiniteInput)
        ));
    }

    #[test]
    fn window_zeroing_clamps_to_clip() {
        let clip = AudioClip::from_flat(1, vec![1.0; 6]).unwrap();
        let z = clip.with_window_zeroed(4, 5);
        assert_eq!(z.as_flat(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
