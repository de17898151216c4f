//! Datasets: IDX (MNIST / Fashion-MNIST) files and synthetic Gaussian blobs.
//!
//! IDX layout: a 4-byte big-endian magic (`0x00000803` for images,
//! `0x00000801` for labels), one 4-byte big-endian size per dimension, then
//! the unsigned-byte payload in row-major order. Gzip-compressed files are
//! detected by their magic bytes and inflated transparently.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::{Matrix, RngState};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Labelled inputs in `[0, 1]^d` with `num_classes` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    batch: Batch,
    num_classes: usize,
    name: String,
}

impl Dataset {
    pub fn new(
        inputs: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if num_classes < 1 {
            return Err(Error::invalid("a dataset needs at least one class"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            batch: Batch::new(inputs, labels)?,
            num_classes,
            name: name.into(),
        })
    }

    pub fn batch(&self) -> &Batch {
        &self.batch
    }

    pub fn inputs(&self) -> &Matrix {
        self.batch.inputs()
    }

    pub fn labels(&self) -> &[usize] {
        self.batch.labels()
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs().cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        self.batch.gather(indices)
    }

    /// The first `n` examples (or all of them when `n >= len`).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Dataset {
            batch: self.gather(&idx),
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    /// Seeded shuffle, then the first `n_first` examples and the rest.
    pub fn shuffle_split(&self, n_first: usize, rng: &mut RngState) -> Result<(Dataset, Dataset)> {
        if n_first > self.len() {
            return Err(Error::invalid(format!(
                "cannot split {} examples at {n_first}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.below(i + 1));
        }
        let part = |ix: &[usize], suffix: &str| Dataset {
            batch: self.gather(ix),
            num_classes: self.num_classes,
            name: format!("{}-{suffix}", self.name),
        };
        Ok((part(&idx[..n_first], "a"), part(&idx[n_first..], "b")))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Inflates gzip input; passes anything else through unchanged.
pub fn maybe_gunzip(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.len() < 2 || bytes[..2] != GZIP_MAGIC {
        return Ok(bytes);
    }
    let mut out = Vec::new();
    GzDecoder::new(bytes.as_slice())
        .read_to_end(&mut out)
        .map_err(|e| Error::invalid(format!("corrupt gzip stream: {e}")))?;
    Ok(out)
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

/// Checks magic and header length; returns the dimension sizes.
fn parse_header(bytes: &[u8], magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * ndims;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            found,
            expected: magic,
        });
    }
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            actual: bytes.len(),
        });
    }
    Ok((0..ndims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect())
}

fn payload(bytes: &[u8], header: usize, count: usize) -> Result<&[u8]> {
    let expected = header + count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(&bytes[header..expected])
}

/// Parses an IDX image file (raw or gzip) into an `n x (rows*cols)` matrix
/// scaled by `1/255`.
pub fn parse_idx_images(bytes: Vec<u8>) -> Result<Matrix> {
    let bytes = maybe_gunzip(bytes)?;
    let dims = parse_header(&bytes, IDX_IMAGES_MAGIC, 3)?;
    let (n, d) = (dims[0], dims[1] * dims[2]);
    let pixels = payload(&bytes, 16, n * d)?;
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Matrix::new(n, d, data)
}

/// Parses an IDX label file (raw or gzip).
pub fn parse_idx_labels(bytes: Vec<u8>) -> Result<Vec<usize>> {
    let bytes = maybe_gunzip(bytes)?;
    let dims = parse_header(&bytes, IDX_LABELS_MAGIC, 1)?;
    Ok(payload(&bytes, 8, dims[0])?
        .iter()
        .map(|&l| usize::from(l))
        .collect())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Matrix> {
    parse_idx_images(read_file(path.as_ref())?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    parse_idx_labels(read_file(path.as_ref())?)
}

/// Loads and pairs an image file with its label file.
pub fn load_idx_dataset(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    num_classes: usize,
    name: impl Into<String>,
) -> Result<Dataset> {
    let x = load_idx_images(images)?;
    let y = load_idx_labels(labels)?;
    pair(x, y, num_classes, name)
}

pub fn pair(
    images: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    name: impl Into<String>,
) -> Result<Dataset> {
    if images.rows() != labels.len() {
        return Err(Error::Pairing {
            images: images.rows(),
            labels: labels.len(),
        });
    }
    Dataset::new(images, labels, num_classes, name)
}

/// Encodes `images` (values in `[0, 1]`) as an IDX image file with
/// `rows x cols` pixels per image; values are quantised to `round(255 x)`.
pub fn encode_idx_images(images: &Matrix, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows * cols != images.cols() {
        return Err(Error::invalid(format!(
            "{rows}x{cols} images do not match row width {}",
            images.cols()
        )));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for dim in [images.rows(), rows, cols] {
        out.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    for &v in images.as_slice() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("pixel {v} outside [0, 1]")));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} exceeds 255")))?);
    }
    Ok(out)
}

/// Parameters of [`synthetic_blobs`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlobSpec {
    pub dim: usize,
    pub classes: usize,
    pub per_class: usize,
    pub separation: f64,
    pub sigma: f64,
}

impl BlobSpec {
    /// Half-width of the raw box mapped onto `[0, 1]`.
    fn half_width(&self) -> f64 {
        let r = self.separation + 6.0 * self.sigma;
        if r > 0.0 {
            r
        } else {
            1.0
        }
    }

    /// Unit direction of class `m`: coordinate axes in turn, with the sign
    /// flipped on every second pass when there are more classes than axes.
    fn center(&self, m: usize) -> (usize, f64) {
        let axis = m % self.dim;
        let sign = if (m / self.dim).is_multiple_of(2) { 1.0 } else { -1.0 };
        (axis, sign * self.separation)
    }
}

/// Isotropic Gaussian blobs, one per class, mapped affinely into `[0, 1]^d`
/// by the fixed map `x -> (x + R) / 2R` (clamped), `R = separation + 6 sigma`.
/// Classes are interleaved, so every prefix is nearly balanced.
pub fn synthetic_blobs(
    d: usize,
    m: usize,
    n_per_class: usize,
    separation: f64,
    sigma: f64,
    rng: &mut RngState,
) -> Result<Dataset> {
    synthetic_blobs_from(
        &BlobSpec {
            dim: d,
            classes: m,
            per_class: n_per_class,
            separation,
            sigma,
        },
        rng,
    )
}

pub fn synthetic_blobs_from(spec: &BlobSpec, rng: &mut RngState) -> Result<Dataset> {
    if spec.dim < 1 || spec.classes < 2 || spec.per_class < 1 {
        return Err(Error::invalid(format!(
            "synthetic blobs need d >= 1, M >= 2, n_per_class >= 1 (got {}, {}, {})",
            spec.dim, spec.classes, spec.per_class
        )));
    }
    if !(spec.separation >= 0.0 && spec.sigma >= 0.0)
        || !spec.separation.is_finite()
        || !spec.sigma.is_finite()
    {
        return Err(Error::invalid("separation and sigma must be finite and >= 0"));
    }
    let n = spec.classes * spec.per_class;
    let r = spec.half_width();
    let mut inputs = Matrix::zeros(n, spec.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        let (axis, offset) = spec.center(class);
        let row = inputs.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            let raw = if j == axis { offset } else { 0.0 } + spec.sigma * rng.standard_normal();
            *v = ((raw + r) / (2.0 * r)).clamp(0.0, 1.0);
        }
        labels.push(class);
    }
    Dataset::new(inputs, labels, spec.classes, "blobs")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_fork;
    use proptest::prelude::*;
    use std::io::Write;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    fn gzip(bytes: &[u8]) -> Vec<u8> {
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(bytes).unwrap();
        enc.finish().unwrap()
    }

    #[test]
    fn hand_built_image_file() {
        let mut bytes = header(0x803, &[1, 2, 2]);
        bytes.extend_from_slice(&[0, 255, 51, 102]);
        let m = parse_idx_images(bytes.clone()).unwrap();
        assert_eq!(m.shape(), (1, 4));
        assert_eq!(m.as_slice(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(parse_idx_images(gzip(&bytes)).unwrap(), m);
    }

    #[test]
    fn label_magic_rejected_by_image_loader() {
        let mut bytes = header(0x801, &[1, 2, 2]);
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            parse_idx_images(bytes),
            Err(Error::BadMagic { found: 0x801, expected: 0x803 })
        ));
    }

    #[test]
    fn empty_and_short_files_are_truncated() {
        assert!(matches!(
            parse_idx_images(Vec::new()),
            Err(Error::Truncated { expected: 16, actual: 0 })
        ));
        let mut bytes = header(0x803, &[2, 2, 2]);
        bytes.extend_from_slice(&[1, 2, 3]);
        assert!(matches!(
            parse_idx_images(bytes),
            Err(Error::Truncated { expected: 24, actual: 19 })
        ));
    }

    #[test]
    fn hand_built_label_file() {
        let mut bytes = header(0x801, &[3]);
        bytes.extend_from_slice(&[0, 3, 9]);
        assert_eq!(parse_idx_labels(bytes.clone()).unwrap(), vec![0, 3, 9]);
        assert_eq!(parse_idx_labels(gzip(&bytes)).unwrap(), vec![0, 3, 9]);
        let mut wrong = header(0x803, &[3]);
        wrong.extend_from_slice(&[0, 3, 9]);
        assert!(matches!(parse_idx_labels(wrong), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn pairing_mismatch() {
        let err = pair(Matrix::zeros(2, 4), vec![1, 2, 3], 10, "x").unwrap_err();
        assert!(matches!(err, Error::Pairing { images: 2, labels: 3 }));
    }

    #[test]
    fn blobs_are_balanced_and_in_unit_box() {
        let mut rng = rng_fork(1, 0);
        let ds = synthetic_blobs(5, 3, 40, 2.0, 0.5, &mut rng).unwrap();
        assert_eq!(ds.len(), 120);
        for c in 0..3 {
            assert_eq!(ds.labels().iter().filter(|&&l| l == c).count(), 40);
        }
        assert!(ds.inputs().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blob_argument_errors() {
        let mut rng = rng_fork(1, 0);
        assert!(synthetic_blobs(0, 3, 4, 1.0, 1.0, &mut rng).is_err());
        assert!(synthetic_blobs(3, 1, 4, 1.0, 1.0, &mut rng).is_err());
        assert!(synthetic_blobs(3, 2, 0, 1.0, 1.0, &mut rng).is_err());
        assert!(synthetic_blobs(3, 2, 4, -1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn shuffle_split_partitions() {
        let mut rng = rng_fork(3, 0);
        let ds = synthetic_blobs(2, 2, 10, 1.0, 0.1, &mut rng).unwrap();
        let (a, b) = ds.shuffle_split(15, &mut rng_fork(4, 0)).unwrap();
        assert_eq!((a.len(), b.len()), (15, 5));
        let (a2, _) = ds.shuffle_split(15, &mut rng_fork(4, 0)).unwrap();
        assert_eq!(a, a2);
    }

    proptest! {
        #[test]
        fn idx_round_trip_is_exact_after_quantisation(seed in any::<u64>(), sep in 0.0f64..5.0) {
            let mut rng = rng_fork(seed, 0);
            let ds = synthetic_blobs(6, 3, 4, sep, 0.3, &mut rng).unwrap();
            let img = encode_idx_images(ds.inputs(), 2, 3).unwrap();
            let quantised = parse_idx_images(img).unwrap();
            prop_assert!(quantised.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            // quantised inputs are fixed points of encode -> parse
            let again = parse_idx_images(encode_idx_images(&quantised, 2, 3).unwrap()).unwrap();
            prop_assert_eq!(&again, &quantised);
            let labels = parse_idx_labels(encode_idx_labels(ds.labels()).unwrap()).unwrap();
            prop_assert_eq!(labels.as_slice(), ds.labels());
        }
    }
}
