//! Patch dataset: label schema, the "PTCH" binary container, and the
//! stratified train/validation split.
//!
//! File layout (little-endian): magic `PTCH`, u16 version = 1, u32 record
//! count, u32 reserved; then per record 3072 raw RGB bytes followed by the
//! label block (u8 class, f32 center_x, f32 center_y, 4 x f32 bbox,
//! u8 concealed, u8 visibility). Packed, no padding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PATCH_PIXELS: usize = 32 * 32 * 3;
pub const LABEL_BYTES: usize = 27;
pub const RECORD_BYTES: usize = PATCH_PIXELS + LABEL_BYTES;
pub const HEADER_BYTES: usize = 14;

const MAGIC: &[u8; 4] = b"PTCH";
const VERSION: u16 = 1;

/// Patch annotation. Geometry is in pixel units with pixel centers at
/// integer coordinates 0..31; centers and boxes may extend outside the
/// patch for truncated objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Label {
    /// 0 = background, 1 = ball.
    pub class: u8,
    pub center_x: f32,
    pub center_y: f32,
    /// x0, y0, x1, y1.
    pub bbox: [f32; 4],
    /// Another object in the foreground partially covers the ball.
    pub concealed: bool,
    /// Visible fraction in 25% steps: 0 = 0-25% .. 3 = 75-100%.
    pub visibility: u8,
}

impl Label {
    pub fn background() -> Self {
        Label {
            class: 0,
            center_x: 0.0,
            center_y: 0.0,
            bbox: [0.0; 4],
            concealed: false,
            visibility: 0,
        }
    }

    pub fn is_ball(&self) -> bool {
        self.class == 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.class > 1 {
            return Err(Error::parameter(format!("label class {} out of range", self.class)));
        }
        if self.visibility > 3 {
            return Err(Error::parameter(format!(
                "visibility quartile {} out of range",
                self.visibility
            )));
        }
        if self.is_ball() {
            let [x0, y0, x1, y1] = self.bbox;
            if x0 > x1 || y0 > y1 {
                return Err(Error::parameter("bbox corners out of order"));
            }
            let mx = 0.5 * (x0 + x1);
            let my = 0.5 * (y0 + y1);
            if (mx - self.center_x).abs() > 1e-3 || (my - self.center_y).abs() > 1e-3 {
                return Err(Error::parameter("center is not the bbox midpoint"));
            }
        }
        Ok(())
    }
}

/// One 32x32 RGB patch plus its label. Pixels are row-major RGB bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub pixels: Vec<u8>,
    pub label: Label,
}

impl PatchRecord {
    pub fn new(pixels: Vec<u8>, label: Label) -> Result<Self> {
        if pixels.len() != PATCH_PIXELS {
            return Err(Error::parameter(format!(
                "patch payload is {} bytes, expected {PATCH_PIXELS}",
                pixels.len()
            )));
        }
        Ok(PatchRecord { pixels, label })
    }

    /// Pixel bytes mapped to [0, 1] floats.
    pub fn to_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|b| *b as f32 / 255.0).collect()
    }
}

/// Stack records into a (n, 32, 32, 3) float batch.
pub fn records_to_batch(records: &[&PatchRecord]) -> Tensor {
    let n = records.len();
    let mut data = Vec::with_capacity(n * PATCH_PIXELS);
    for r in records {
        data.extend(r.pixels.iter().map(|b| *b as f32 / 255.0));
    }
    Tensor::from_vec([n, 32, 32, 3], data).expect("record payload sizes are fixed")
}

pub fn write_dataset(records: &[PatchRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(records, &mut w)
}

pub fn write_dataset_to(records: &[PatchRecord], w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    for r in records {
        if r.pixels.len() != PATCH_PIXELS {
            return Err(Error::parameter("record payload has wrong size"));
        }
        w.write_all(&r.pixels)?;
        let l = &r.label;
        w.write_all(&[l.class])?;
        w.write_all(&l.center_x.to_le_bytes())?;
        w.write_all(&l.center_y.to_le_bytes())?;
        for v in l.bbox {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[l.concealed as u8, l.visibility])?;
    }
    w.flush()?;
    Ok(())
}

/// Streaming dataset reader; one record of state at a time.
#[derive(Debug)]
pub struct DatasetReader<R: Read> {
    src: R,
    remaining: u32,
    index: u32,
    offset: u64,
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        DatasetReader::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut src: R) -> Result<Self> {
        let mut header = [0u8; HEADER_BYTES];
        read_exact_at(&mut src, &mut header, 0, "file header")?;
        if &header[0..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"PTCH\""));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes([header[6], header[7], header[8], header[9]]);
        Ok(DatasetReader {
            src,
            remaining: count,
            index: 0,
            offset: HEADER_BYTES as u64,
        })
    }

    pub fn remaining(&self) -> u32 {
        self.remaining
    }

    fn read_record(&mut self) -> Result<PatchRecord> {
        let mut pixels = vec![0u8; PATCH_PIXELS];
        let ctx = format!("record {}", self.index);
        read_exact_at(&mut self.src, &mut pixels, self.offset, &ctx)?;
        let mut label = [0u8; LABEL_BYTES];
        read_exact_at(
            &mut self.src,
            &mut label,
            self.offset + PATCH_PIXELS as u64,
            &ctx,
        )?;
        self.offset += RECORD_BYTES as u64;
        self.index += 1;
        self.remaining -= 1;
        let f32_at = |i: usize| f32::from_le_bytes([label[i], label[i + 1], label[i + 2], label[i + 3]]);
        Ok(PatchRecord {
            pixels,
            label: Label {
                class: label[0],
                center_x: f32_at(1),
                center_y: f32_at(5),
                bbox: [f32_at(9), f32_at(13), f32_at(17), f32_at(21)],
                concealed: label[25] != 0,
                visibility: label[26],
            },
        })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<PatchRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        Some(self.read_record())
    }
}

fn read_exact_at(src: &mut impl Read, buf: &mut [u8], offset: u64, ctx: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match src.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::format(
                    offset + filled as u64,
                    format!("unexpected end of file while reading {ctx}"),
                ))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<PatchRecord>> {
    DatasetReader::open(path)?.collect()
}

/// Seeded, class-stratified shuffle split. Both halves preserve the
/// positive fraction to within a record per class.
pub fn split_dataset(
    records: &[PatchRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<PatchRecord>, Vec<PatchRecord>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::parameter(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [1u8, 0u8] {
        let mut idx: Vec<usize> = (0..records.len())
            .filter(|i| records[*i].label.class == class)
            .collect();
        idx.shuffle(&mut rng);
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        let n_train = n_train.min(idx.len());
        for (k, i) in idx.into_iter().enumerate() {
            if k < n_train {
                train.push(records[i].clone());
            } else {
                val.push(records[i].clone());
            }
        }
    }
    train.shuffle(&mut rng);
    val.shuffle(&mut rng);
    Ok((train, val))
}

/// Fraction of records labeled as ball.
pub fn positive_fraction(records: &[PatchRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.label.is_ball()).count() as f64 / records.len() as f64
}

/// Visibility quartile from the fraction of the object inside the patch
/// and the fraction of that part concealed by a foreground object:
/// `floor(4 * clamp(inside * (1 - occluded), 0, 0.999...))`.
pub fn compute_visibility(inside_fraction: f64, occluded_fraction: f64) -> u8 {
    let product = (inside_fraction.clamp(0.0, 1.0)) * (1.0 - occluded_fraction.clamp(0.0, 1.0));
    (4.0 * product.clamp(0.0, 0.999_999)) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_records(n: usize, positive_every: usize) -> Vec<PatchRecord> {
        (0..n)
            .map(|i| {
                let positive = positive_every > 0 && i % positive_every == 0;
                let label = if positive {
                    Label {
                        class: 1,
                        center_x: 10.0 + i as f32,
                        center_y: 5.0,
                        bbox: [5.0 + i as f32, 0.0, 15.0 + i as f32, 10.0],
                        concealed: i % 3 == 0,
                        visibility: (i % 4) as u8,
                    }
                } else {
                    Label::background()
                };
                PatchRecord::new(vec![(i % 251) as u8; PATCH_PIXELS], label).unwrap()
            })
            .collect()
    }

    #[test]
    fn roundtrip_is_identity() {
        let records = sample_records(9, 2);
        let mut buf = Vec::new();
        write_dataset_to(&records, &mut buf).unwrap();
        assert_eq!(buf.len(), HEADER_BYTES + records.len() * RECORD_BYTES);
        let back: Vec<PatchRecord> = DatasetReader::new(buf.as_slice())
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let mut buf = Vec::new();
        write_dataset_to(&[], &mut buf).unwrap();
        assert_eq!(buf.len(), HEADER_BYTES);
        let back: Vec<PatchRecord> = DatasetReader::new(buf.as_slice())
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn bad_magic_is_positioned_format_error() {
        let mut buf = Vec::new();
        write_dataset_to(&sample_records(1, 0), &mut buf).unwrap();
        buf[0] = b'X';
        match DatasetReader::new(buf.as_slice()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_record_index() {
        let mut buf = Vec::new();
        write_dataset_to(&sample_records(3, 2), &mut buf).unwrap();
        buf.truncate(HEADER_BYTES + RECORD_BYTES + 100);
        let result: Result<Vec<PatchRecord>> = DatasetReader::new(buf.as_slice()).unwrap().collect();
        match result {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("record 1"), "{reason}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut buf = Vec::new();
        write_dataset_to(&[], &mut buf).unwrap();
        buf[4] = 9;
        match DatasetReader::new(buf.as_slice()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn split_examples() {
        let records = sample_records(10, 0);
        let (train, val) = split_dataset(&records, 0.7, 1).unwrap();
        assert_eq!(train.len(), 7);
        assert_eq!(val.len(), 3);
        assert!(split_dataset(&records, 1.0, 1).is_err());
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let records = sample_records(40, 3);
        let (a_train, a_val) = split_dataset(&records, 0.7, 5).unwrap();
        let (b_train, b_val) = split_dataset(&records, 0.7, 5).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_val, b_val);
        let (c_train, _) = split_dataset(&records, 0.7, 6).unwrap();
        assert_ne!(a_train, c_train);
    }

    #[test]
    fn split_is_stratified() {
        let records = sample_records(2000, 3);
        let (train, val) = split_dataset(&records, 0.7, 9).unwrap();
        let diff = (positive_fraction(&train) - positive_fraction(&val)).abs();
        assert!(diff < 0.01, "stratification off by {diff}");
    }

    #[test]
    fn visibility_examples() {
        assert_eq!(compute_visibility(1.0, 0.0), 3);
        assert_eq!(compute_visibility(0.6, 0.5), 1);
        assert_eq!(compute_visibility(0.0, 0.0), 0);
        assert_eq!(compute_visibility(0.25, 0.0), 1);
        assert_eq!(compute_visibility(0.2499, 0.0), 0);
    }

    #[test]
    fn label_validation() {
        let mut l = Label {
            class: 1,
            center_x: 10.0,
            center_y: 10.0,
            bbox: [5.0, 5.0, 15.0, 15.0],
            concealed: false,
            visibility: 3,
        };
        assert!(l.validate().is_ok());
        l.center_x = 11.0;
        assert!(l.validate().is_err());
        l.center_x = 10.0;
        l.bbox = [15.0, 5.0, 5.0, 15.0];
        assert!(l.validate().is_err());
    }
}
