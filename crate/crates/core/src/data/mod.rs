//! Image classification splits and their on-disk formats.
//!
//! A dataset directory holds either an idx pair (`images.idx`,
//! `labels.idx`) or a single `data.raw` file.
//!
//! idx follows the usual layout: two zero bytes, a type code (`0x08` for
//! unsigned bytes), the dimension count, then each extent as a big-endian
//! `u32`. Images are `(count, height, width, channels)`; a three-dimension
//! image file is read as single-channel. Labels are one-dimensional.
//!
//! `data.raw` is the fallback: the magic `ACRW`, then `count`, `height`,
//! `width`, `channels` as little-endian `u32`, then `count` records of one
//! label byte followed by the pixels in `(height, width, channels)` order.

mod synth;

use std::fs;
use std::path::Path;

pub use synth::{class_name, synthetic_split, SYNTH_CLASSES, SYNTH_SIZE};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::tensor::Tensor;

pub const IDX_IMAGES: &str = "images.idx";
pub const IDX_LABELS: &str = "labels.idx";
pub const RAW_FILE: &str = "data.raw";
pub const RAW_MAGIC: &[u8; 4] = b"ACRW";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    Idx,
    Raw,
}

impl DatasetFormat {
    /// Picks the format from the files present in `dir`.
    pub fn detect(dir: &Path) -> Result<Self> {
        if dir.join(IDX_IMAGES).exists() {
            Ok(DatasetFormat::Idx)
        } else if dir.join(RAW_FILE).exists() {
            Ok(DatasetFormat::Raw)
        } else {
            Err(Error::invalid(format!(
                "{} holds neither {IDX_IMAGES} nor {RAW_FILE}",
                dir.display()
            )))
        }
    }
}

/// `u8` images in `(height, width, channels)` order with labels and
/// per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub kind: SplitKind,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl DatasetSplit {
    /// Validates labels and computes normalization statistics.
    pub fn new(
        kind: SplitKind,
        (height, width, channels): (usize, usize, usize),
        classes: usize,
        images: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let pixels = height * width * channels;
        if pixels == 0 || images.len() != labels.len() * pixels {
            return Err(Error::invalid(format!(
                "{} image bytes do not match {} labels of {height}x{width}x{channels}",
                images.len(),
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
            return Err(Error::LabelOutOfRange { index, label, classes });
        }
        let mut split = DatasetSplit {
            kind,
            height,
            width,
            channels,
            classes,
            images,
            labels,
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        };
        split.compute_stats();
        Ok(split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    fn compute_stats(&mut self) {
        let c = self.channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (k, &v) in self.images.iter().enumerate() {
            let v = v as f64 / 255.0;
            sum[k % c] += v;
            sq[k % c] += v * v;
        }
        let n = (self.images.len() / c).max(1) as f64;
        for ch in 0..c {
            let m = sum[ch] / n;
            let var = (sq[ch] / n - m * m).max(0.0);
            self.mean[ch] = m as f32;
            self.std[ch] = (var.sqrt() as f32).max(1e-3);
        }
    }

    /// Copies another split's statistics so both are normalized alike.
    pub fn with_stats_from(mut self, other: &DatasetSplit) -> Self {
        self.mean = other.mean.clone();
        self.std = other.std.clone();
        self
    }

    /// Normalized `(n, channels, height, width)` batch of the given images.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0f32; indices.len() * c * h * w];
        for (b, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let v = img[(y * w + x) * c + ch] as f32 / 255.0;
                        out[((b * c + ch) * h + y) * w + x] = (v - self.mean[ch]) / self.std[ch];
                    }
                }
            }
        }
        Tensor::new(vec![indices.len(), c, h, w], out).expect("batch shape")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] as usize).collect()
    }

    /// The first `n` images (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> DatasetSplit {
        let n = n.min(self.len());
        DatasetSplit {
            kind: self.kind,
            height: self.height,
            width: self.width,
            channels: self.channels,
            classes: self.classes,
            images: self.images[..n * self.pixels()].to_vec(),
            labels: self.labels[..n].to_vec(),
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::Truncated {
                what: self.what,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn magic_of(bytes: &[u8]) -> Vec<u8> {
    bytes[..bytes.len().min(4)].to_vec()
}

/// Decodes an idx byte array into its extents and payload.
pub fn decode_idx<'a>(bytes: &'a [u8], what: &'static str) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 || bytes[3] == 0 {
        return Err(Error::BadMagic {
            what,
            expected: vec![0, 0, 0x08],
            found: magic_of(bytes),
        });
    }
    let mut r = Reader { bytes, pos: 4, what };
    let dims = (0..bytes[3]).map(|_| r.u32_be().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    let payload = r.take(n)?;
    Ok((dims, payload))
}

pub fn encode_idx(dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

pub fn decode_raw(bytes: &[u8], kind: SplitKind, classes: usize) -> Result<DatasetSplit> {
    if bytes.len() < 4 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::BadMagic {
            what: "raw dataset",
            expected: RAW_MAGIC.to_vec(),
            found: magic_of(bytes),
        });
    }
    let mut r = Reader {
        bytes,
        pos: 4,
        what: "raw dataset",
    };
    let count = r.u32_le()? as usize;
    let (h, w, c) = (r.u32_le()? as usize, r.u32_le()? as usize, r.u32_le()? as usize);
    let pixels = h * w * c;
    let mut images = Vec::with_capacity(count * pixels);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(r.take(1)?[0]);
        images.extend_from_slice(r.take(pixels)?);
    }
    DatasetSplit::new(kind, (h, w, c), classes, images, labels)
}

pub fn encode_raw(split: &DatasetSplit) -> Vec<u8> {
    let mut out = RAW_MAGIC.to_vec();
    for v in [split.len(), split.height, split.width, split.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for i in 0..split.len() {
        out.push(split.labels[i]);
        out.extend_from_slice(split.image(i));
    }
    out
}

/// Reads the split stored in directory `dir`.
pub fn load_dataset(dir: &Path, format: DatasetFormat, kind: SplitKind, classes: usize) -> Result<DatasetSplit> {
    match format {
        DatasetFormat::Raw => decode_raw(&read_file(&dir.join(RAW_FILE))?, kind, classes),
        DatasetFormat::Idx => {
            let image_bytes = read_file(&dir.join(IDX_IMAGES))?;
            let label_bytes = read_file(&dir.join(IDX_LABELS))?;
            let (idims, pixels) = decode_idx(&image_bytes, "idx images")?;
            let (ldims, labels) = decode_idx(&label_bytes, "idx labels")?;
            let (count, h, w, c) = match idims[..] {
                [n, h, w] => (n, h, w, 1),
                [n, h, w, c] => (n, h, w, c),
                _ => return Err(Error::invalid(format!("idx images must have 3 or 4 dimensions, got {idims:?}"))),
            };
            if ldims != [count] {
                return Err(Error::invalid(format!(
                    "idx labels have extents {ldims:?}, expected [{count}]"
                )));
            }
            DatasetSplit::new(kind, (h, w, c), classes, pixels.to_vec(), labels.to_vec())
        }
    }
}

/// Writes `split` into directory `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, format: DatasetFormat, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match format {
        DatasetFormat::Raw => write_atomic(&dir.join(RAW_FILE), &encode_raw(split)),
        DatasetFormat::Idx => {
            let dims = [split.len(), split.height, split.width, split.channels];
            write_atomic(&dir.join(IDX_IMAGES), &encode_idx(&dims, &split.images))?;
            write_atomic(&dir.join(IDX_LABELS), &encode_idx(&[split.len()], &split.labels))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetSplit {
        let images = (0..4 * 2 * 2 * 3).map(|v| (v * 7 % 256) as u8).collect();
        DatasetSplit::new(SplitKind::Train, (2, 2, 3), 10, images, vec![3, 0, 9, 1]).unwrap()
    }

    #[test]
    fn idx_bytes_round_trip() {
        let s = tiny();
        let bytes = encode_idx(&[4, 2, 2, 3], &s.images);
        assert_eq!(&bytes[..4], &[0, 0, 8, 4]);
        let (dims, payload) = decode_idx(&bytes, "t").unwrap();
        assert_eq!(dims, vec![4, 2, 2, 3]);
        assert_eq!(payload, &s.images[..]);
    }

    #[test]
    fn raw_round_trip() {
        let s = tiny();
        let back = decode_raw(&encode_raw(&s), SplitKind::Train, 10).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn raw_truncation_is_named() {
        let bytes = encode_raw(&tiny());
        let err = decode_raw(&bytes[..bytes.len() - 1], SplitKind::Train, 10).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn batch_is_channel_major_and_normalized() {
        let s = tiny();
        let b = s.batch(&[0, 1, 2, 3]);
        assert_eq!(b.shape(), &[4, 3, 2, 2]);
        for ch in 0..3 {
            let vals: Vec<f32> = (0..4)
                .flat_map(|n| (0..4).map(move |k| (n, k)))
                .map(|(n, k)| b.data()[(n * 3 + ch) * 4 + k])
                .collect();
            let mean: f32 = vals.iter().sum::<f32>() / vals.len() as f32;
            assert!(mean.abs() < 1e-5);
        }
    }
}
