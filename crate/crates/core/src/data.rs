//! Dataset ingestion: IDX files, binarization and a small synthetic task.

use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DbmError, Result};
use crate::inpaint::Example;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An unsigned-byte IDX tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    /// Number of items along the first dimension.
    pub fn count(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    /// Bytes per item.
    pub fn item_len(&self) -> usize {
        self.dims.iter().skip(1).product()
    }

    pub fn item(&self, i: usize) -> &[u8] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(DbmError::Format("IDX file shorter than its magic number".into()));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if magic != IDX_IMAGES_MAGIC && magic != IDX_LABELS_MAGIC {
        return Err(DbmError::Format(format!("bad IDX magic {magic:#010x}")));
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(DbmError::Format("truncated IDX header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let len: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != len {
        return Err(DbmError::Format(format!(
            "IDX body has {} bytes but dimensions {dims:?} need {len}",
            body.len()
        )));
    }
    Ok(IdxArray { dims, data: body.to_vec() })
}

pub fn load_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&fs::read(path)?)
}

/// Loads an image file and its label file, checking that they agree.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<(IdxArray, Vec<u8>)> {
    let img = load_idx(images)?;
    let lab = load_idx(labels)?;
    if img.dims.len() != 3 {
        return Err(DbmError::Format(format!("{} is not an image file", images.display())));
    }
    if lab.dims.len() != 1 {
        return Err(DbmError::Format(format!("{} is not a label file", labels.display())));
    }
    if img.count() != lab.count() {
        return Err(DbmError::Format(format!(
            "{} images but {} labels",
            img.count(),
            lab.count()
        )));
    }
    Ok((img, lab.data))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BinarizeRule {
    /// `pixel > 127.5`
    Threshold,
    /// Each pixel is 1 with probability `pixel / 255`.
    Bernoulli { seed: u64 },
}

impl Default for BinarizeRule {
    fn default() -> Self {
        BinarizeRule::Threshold
    }
}

/// One binary row per item.
pub fn binarize(images: &IdxArray, rule: BinarizeRule) -> Vec<Array1<f64>> {
    let mut rng = match rule {
        BinarizeRule::Bernoulli { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        BinarizeRule::Threshold => None,
    };
    (0..images.count())
        .map(|i| {
            images
                .item(i)
                .iter()
                .map(|&px| {
                    let on = match &mut rng {
                        None => f64::from(px) > 127.5,
                        Some(r) => r.random::<f64>() < f64::from(px) / 255.0,
                    };
                    f64::from(u8::from(on))
                })
                .collect()
        })
        .collect()
}

/// Horizontal-vs-vertical bars on a `side x side` grid.
///
/// Class 0 switches on random rows, class 1 random columns (each with
/// probability `bar_prob`, at least one and never all), then every pixel is
/// flipped with probability `noise`.
pub fn bars_task(n: usize, side: usize, bar_prob: f64, noise: f64, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let class = rng.random_range(0..2usize);
            let bars = loop {
                let b: Vec<bool> = (0..side).map(|_| rng.random_bool(bar_prob)).collect();
                let on = b.iter().filter(|&&x| x).count();
                if on > 0 && on < side {
                    break b;
                }
            };
            let v: Array1<f64> = (0..side * side)
                .map(|p| {
                    let (r, c) = (p / side, p % side);
                    let on = if class == 0 { bars[r] } else { bars[c] };
                    f64::from(u8::from(on ^ rng.random_bool(noise)))
                })
                .collect();
            (v, Some(class))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(body);
        out
    }

    #[test]
    fn parses_hand_built_image_file() {
        let body = [0u8, 10, 200, 255, 1, 2, 3, 128];
        let a = parse_idx(&idx_bytes(IDX_IMAGES_MAGIC, &[2, 2, 2], &body)).unwrap();
        assert_eq!(a.dims, vec![2, 2, 2]);
        assert_eq!(a.data, body);
        assert_eq!(a.item(1), &[1, 2, 3, 128]);
    }

    #[test]
    fn parses_label_file() {
        let a = parse_idx(&idx_bytes(IDX_LABELS_MAGIC, &[3], &[7, 0, 9])).unwrap();
        assert_eq!(a.count(), 3);
        assert_eq!(a.data, vec![7, 0, 9]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(parse_idx(&idx_bytes(0x0000_0903, &[1], &[0])).is_err());
        assert!(parse_idx(&idx_bytes(IDX_LABELS_MAGIC, &[3], &[7, 0])).is_err());
        assert!(parse_idx(&[0, 0, 8]).is_err());
        assert!(parse_idx(&IDX_IMAGES_MAGIC.to_be_bytes()).is_err());
    }

    #[test]
    fn pair_count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        fs::write(&img, idx_bytes(IDX_IMAGES_MAGIC, &[2, 1, 2], &[0, 1, 2, 3])).unwrap();
        fs::write(&lab, idx_bytes(IDX_LABELS_MAGIC, &[3], &[0, 1, 2])).unwrap();
        assert!(load_idx_pair(&img, &lab).is_err());
        fs::write(&lab, idx_bytes(IDX_LABELS_MAGIC, &[2], &[0, 1])).unwrap();
        assert!(load_idx_pair(&img, &lab).is_ok());
    }

    #[test]
    fn threshold_and_bernoulli_binarization() {
        let a = IdxArray { dims: vec![2, 1, 3], data: vec![0, 0, 0, 127, 128, 255] };
        let rows = binarize(&a, BinarizeRule::Threshold);
        assert_eq!(rows[0].to_vec(), vec![0.0, 0.0, 0.0]);
        assert_eq!(rows[1].to_vec(), vec![0.0, 1.0, 1.0]);
        let b1 = binarize(&a, BinarizeRule::Bernoulli { seed: 4 });
        let b2 = binarize(&a, BinarizeRule::Bernoulli { seed: 4 });
        assert_eq!(b1, b2);
        assert_eq!(b1[0].to_vec(), vec![0.0, 0.0, 0.0]);
        assert_eq!(b1[1][2], 1.0);
    }

    #[test]
    fn bars_are_balanced_binary_and_seeded() {
        let data = bars_task(400, 8, 0.3, 0.05, 1);
        assert_eq!(data, bars_task(400, 8, 0.3, 0.05, 1));
        let ones = data.iter().filter(|(_, y)| *y == Some(1)).count();
        assert!((150..250).contains(&ones));
        assert!(data.iter().all(|(v, _)| v.len() == 64 && v.iter().all(|&x| x == 0.0 || x == 1.0)));
    }
}
