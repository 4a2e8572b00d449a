//! Flat binary per-frame feature files.
//!
//! Layout: a 16-byte header of two little-endian `u64` values `T` (frame
//! count) and `D` (feature width), followed by `T * D` little-endian `f64`
//! values in row-major order.  One file holds the features for one video at
//! one frame per second.

use std::fs;
use std::path::Path;

use crate::error::{AvqaError, Result};

/// Per-frame features for a single video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub frames: usize,
    pub dim: usize,
    /// Row-major `frames * dim` values.
    pub data: Vec<f64>,
}

impl FeatureTable {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(AvqaError::config(format!(
                "feature table needs {} values for {frames}x{dim}, got {}",
                frames * dim,
                data.len()
            )));
        }
        Ok(FeatureTable { frames, dim, data })
    }

    /// Row slice for one frame.
    pub fn frame(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    /// Copies the inclusive frame window `[start, end]` into a flat buffer.
    pub fn window(&self, start: usize, end: usize) -> Vec<f64> {
        self.data[start * self.dim..(end + 1) * self.dim].to_vec()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(16 + self.data.len() * 8);
        bytes.extend_from_slice(&(self.frames as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| AvqaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| AvqaError::io(path, e))?;
        if bytes.len() < 16 {
            return Err(AvqaError::config(format!(
                "feature file {} shorter than its header",
                path.display()
            )));
        }
        let frames = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let dim = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let expected = 16 + frames * dim * 8;
        if bytes.len() != expected {
            return Err(AvqaError::config(format!(
                "feature file {} holds {} bytes, header implies {expected}",
                path.display(),
                bytes.len()
            )));
        }
        let mut data = Vec::with_capacity(frames * dim);
        for chunk in bytes[16..].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        Ok(FeatureTable { frames, dim, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.feat");
        let table = FeatureTable::new(3, 2, vec![0.5, -1.25, 3.0, 0.1, -0.0, 9.75]).unwrap();
        table.save(&path).unwrap();
        let back = FeatureTable::load(&path).unwrap();
        assert_eq!(table, back);
        assert_eq!(back.frame(1), &[3.0, 0.1]);
        assert_eq!(back.window(1, 2), &[3.0, 0.1, -0.0, 9.75]);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.feat");
        let table = FeatureTable::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        table.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(FeatureTable::load(&path).is_err());
    }

    #[test]
    fn size_mismatch_is_rejected() {
        assert!(FeatureTable::new(2, 3, vec![0.0; 5]).is_err());
    }
}
