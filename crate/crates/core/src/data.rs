//! Loaders for the IDX (MNIST, Fashion-MNIST) and CIFAR-10 binary formats.
//!
//! Pixels are scaled to `[0, 1]` exactly once, when a [`RawDataset`] is
//! constructed from file bytes. No public path takes an already-scaled matrix
//! back through the scaler.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CsadError, Result};
use crate::scalar::{c, Scalar};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 3073;
pub const CIFAR_PIXELS: usize = 3072;
pub const N_CLASSES: usize = 10;

/// Environment variable consulted when no `--data-dir` flag is given.
pub const DATA_DIR_ENV: &str = "CSAD_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    Mnist,
    FashionMnist,
    Cifar10,
    Synthetic,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::FashionMnist => "fashion-mnist",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Synthetic => "synthetic",
        }
    }

    /// Native image layout of the dataset.
    pub fn image_shape(self) -> Option<ImageShape> {
        match self {
            DatasetId::Mnist | DatasetId::FashionMnist => Some(ImageShape::new(1, 28, 28)),
            DatasetId::Cifar10 => Some(ImageShape::new(3, 32, 32)),
            DatasetId::Synthetic => None,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = CsadError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetId::Mnist),
            "fashion-mnist" | "fashion_mnist" | "fashionmnist" | "fmnist" => {
                Ok(DatasetId::FashionMnist)
            }
            "cifar10" | "cifar-10" => Ok(DatasetId::Cifar10),
            "synthetic" => Ok(DatasetId::Synthetic),
            other => Err(CsadError::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Channel-major image layout (`channels × height × width` when flattened).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn n_pixels(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// A fully loaded split: scaled, flattened images plus their 0–9 labels.
#[derive(Debug, Clone)]
pub struct RawDataset<A> {
    images: Array2<A>,
    labels: Vec<u8>,
    name: DatasetId,
    split: Split,
    shape: Option<ImageShape>,
    content_hash: String,
}

impl<A: Scalar> RawDataset<A> {
    /// Build a dataset from raw byte pixels, scaling by 1/255.
    pub fn from_bytes(
        name: DatasetId,
        split: Split,
        shape: ImageShape,
        pixels: &[u8],
        labels: Vec<u8>,
    ) -> Result<Self> {
        let n_pixels = shape.n_pixels();
        if pixels.len() != labels.len() * n_pixels {
            return Err(CsadError::LengthMismatch {
                what: format!("{name} {split:?} pixels"),
                expected: labels.len() * n_pixels,
                found: pixels.len(),
            });
        }
        validate_labels(&labels)?;
        let content_hash = hash_parts(&[pixels, &labels]);
        let images = scale_bytes(pixels, labels.len(), n_pixels);
        Ok(Self {
            images,
            labels,
            name,
            split,
            shape: Some(shape),
            content_hash,
        })
    }

    /// Wrap already-normalized values (synthetic generators). Values are
    /// checked against `[0, 1]` rather than rescaled.
    pub fn from_unit_interval(
        name: DatasetId,
        split: Split,
        images: Array2<A>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(CsadError::Validation(format!(
                "{} image rows vs {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        if images.iter().any(|&v| !(v >= A::zero() && v <= A::one())) {
            return Err(CsadError::Validation(
                "pixel values must lie in [0, 1]".into(),
            ));
        }
        validate_labels(&labels)?;
        let mut bytes = Vec::with_capacity(images.len() * 8);
        for &v in images.iter() {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        let content_hash = hash_parts(&[&bytes, &labels]);
        Ok(Self {
            images,
            labels,
            name,
            split,
            shape: None,
            content_hash,
        })
    }

    /// Attach an image layout to a dataset built from the unit interval.
    pub fn with_shape(mut self, shape: ImageShape) -> Result<Self> {
        if shape.n_pixels() != self.n_pixels() {
            return Err(CsadError::Validation(format!(
                "shape {shape:?} has {} pixels, rows have {}",
                shape.n_pixels(),
                self.n_pixels()
            )));
        }
        self.shape = Some(shape);
        Ok(self)
    }

    pub fn images(&self) -> &Array2<A> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn name(&self) -> DatasetId {
        self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn shape(&self) -> Option<ImageShape> {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_pixels(&self) -> usize {
        self.images.ncols()
    }

    /// SHA-256 over the raw payload; identical files give identical hashes.
    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    /// Class-stratified subset of at most `limit` rows, chosen
    /// deterministically from `seed`. The hash is extended with the selection
    /// so subsets never collide with the full split.
    pub fn stratified_subset(&self, limit: usize, seed: u64) -> Self {
        if limit >= self.len() {
            return self.clone();
        }
        let idx = crate::stream::stratified_take(&self.labels, limit, seed);
        let images = self.images.select(ndarray::Axis(0), &idx);
        let labels: Vec<u8> = idx.iter().map(|&i| self.labels[i]).collect();
        let sel: Vec<u8> = idx.iter().flat_map(|&i| (i as u64).to_le_bytes()).collect();
        let content_hash = hash_parts(&[self.content_hash.as_bytes(), &sel]);
        Self {
            images,
            labels,
            name: self.name,
            split: self.split,
            shape: self.shape,
            content_hash,
        }
    }
}

fn scale_bytes<A: Scalar>(pixels: &[u8], rows: usize, cols: usize) -> Array2<A> {
    let max = c::<A>(255.0);
    let data: Vec<A> = pixels
        .iter()
        .map(|&b| A::from_u8(b).expect("u8 fits") / max)
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape checked by caller")
}

fn validate_labels(labels: &[u8]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= N_CLASSES) {
        return Err(CsadError::Validation(format!("label {bad} outside 0..=9")));
    }
    Ok(())
}

fn hash_parts(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// One half of an IDX pair.
#[derive(Debug, Clone)]
pub enum IdxPart<A> {
    Images {
        images: Array2<A>,
        rows: usize,
        cols: usize,
        raw: Vec<u8>,
    },
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parse an in-memory IDX file.
pub fn parse_idx<A: Scalar>(bytes: &[u8], what: &str) -> Result<IdxPart<A>> {
    if bytes.len() < 8 {
        return Err(CsadError::format(what, "file shorter than IDX header"));
    }
    match be_u32(bytes, 0) {
        IDX_IMAGES_MAGIC => {
            if bytes.len() < 16 {
                return Err(CsadError::format(what, "truncated image header"));
            }
            let n = be_u32(bytes, 4) as usize;
            let rows = be_u32(bytes, 8) as usize;
            let cols = be_u32(bytes, 12) as usize;
            let expected = n * rows * cols;
            let payload = &bytes[16..];
            if payload.len() != expected {
                return Err(CsadError::LengthMismatch {
                    what: what.to_string(),
                    expected,
                    found: payload.len(),
                });
            }
            Ok(IdxPart::Images {
                images: scale_bytes(payload, n, rows * cols),
                rows,
                cols,
                raw: payload.to_vec(),
            })
        }
        IDX_LABELS_MAGIC => {
            let n = be_u32(bytes, 4) as usize;
            let payload = &bytes[8..];
            if payload.len() != n {
                return Err(CsadError::LengthMismatch {
                    what: what.to_string(),
                    expected: n,
                    found: payload.len(),
                });
            }
            Ok(IdxPart::Labels(payload.to_vec()))
        }
        other => Err(CsadError::format(
            what,
            format!("bad magic number {other:#010x}"),
        )),
    }
}

pub fn load_idx<A: Scalar>(path: &Path) -> Result<IdxPart<A>> {
    let bytes = fs::read(path).map_err(|e| CsadError::io(path, e))?;
    parse_idx(&bytes, &path.display().to_string())
}

/// Parse one CIFAR-10 batch into `(labels, pixels)`.
pub fn parse_cifar_batch(bytes: &[u8], what: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(CsadError::format(
            what,
            format!(
                "size {} is not a multiple of the {CIFAR_RECORD_LEN}-byte record",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

fn read_cifar_files(paths: &[PathBuf]) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for p in paths {
        let bytes = fs::read(p).map_err(|e| CsadError::io(p, e))?;
        let (l, px) = parse_cifar_batch(&bytes, &p.display().to_string())?;
        labels.extend(l);
        pixels.extend(px);
    }
    Ok((labels, pixels))
}

/// Load the CIFAR-10 binary distribution (`data_batch_1..5.bin`,
/// `test_batch.bin`) from `dir`. Returns `(train, test)`.
pub fn load_cifar10<A: Scalar>(dir: &Path) -> Result<(RawDataset<A>, RawDataset<A>)> {
    let train_paths: Vec<PathBuf> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    let shape = ImageShape::new(3, 32, 32);
    let (labels, pixels) = read_cifar_files(&train_paths)?;
    let train = RawDataset::from_bytes(DatasetId::Cifar10, Split::Train, shape, &pixels, labels)?;
    let (labels, pixels) = read_cifar_files(&[dir.join("test_batch.bin")])?;
    let test = RawDataset::from_bytes(DatasetId::Cifar10, Split::Test, shape, &pixels, labels)?;
    Ok((train, test))
}

fn load_idx_pair<A: Scalar>(
    dir: &Path,
    prefix: &str,
    name: DatasetId,
    split: Split,
) -> Result<RawDataset<A>> {
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let img_bytes = fs::read(&img_path).map_err(|e| CsadError::io(&img_path, e))?;
    let (raw, rows, cols) = match parse_idx::<A>(&img_bytes, &img_path.display().to_string())? {
        IdxPart::Images { raw, rows, cols, .. } => (raw, rows, cols),
        IdxPart::Labels(_) => {
            return Err(CsadError::format(
                img_path.display().to_string(),
                "expected an image file, found labels",
            ))
        }
    };
    let labels = match load_idx::<A>(&lbl_path)? {
        IdxPart::Labels(l) => l,
        IdxPart::Images { .. } => {
            return Err(CsadError::format(
                lbl_path.display().to_string(),
                "expected a label file, found images",
            ))
        }
    };
    if raw.len() != labels.len() * rows * cols {
        return Err(CsadError::LengthMismatch {
            what: format!("{} image/label count", dir.display()),
            expected: labels.len() * rows * cols,
            found: raw.len(),
        });
    }
    RawDataset::from_bytes(name, split, ImageShape::new(1, rows, cols), &raw, labels)
}

/// Resolve the data root: explicit flag, then `CSAD_DATA_DIR`, then `./data`.
pub fn resolve_data_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Load one split of a named dataset from the data root.
///
/// Layout: `<root>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte`,
/// the same under `<root>/fashion-mnist/`, and
/// `<root>/cifar-10-batches-bin/*.bin`.
pub fn load_dataset<A: Scalar>(root: &Path, id: DatasetId, split: Split) -> Result<RawDataset<A>> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    match id {
        DatasetId::Mnist => load_idx_pair(&root.join("mnist"), prefix, id, split),
        DatasetId::FashionMnist => load_idx_pair(&root.join("fashion-mnist"), prefix, id, split),
        DatasetId::Cifar10 => {
            let (train, test) = load_cifar10(&root.join("cifar-10-batches-bin"))?;
            Ok(match split {
                Split::Train => train,
                Split::Test => test,
            })
        }
        DatasetId::Synthetic => Err(CsadError::Config(
            "synthetic datasets are generated, not loaded".into(),
        )),
    }
}

/// Row-wise one-hot encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotTargets<A>(Array2<A>);

impl<A: Scalar> OneHotTargets<A> {
    pub fn matrix(&self) -> &Array2<A> {
        &self.0
    }

    pub fn into_matrix(self) -> Array2<A> {
        self.0
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.0
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, A::neg_infinity()), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }
}

pub fn one_hot<A: Scalar>(labels: &[usize], n_classes: usize) -> Result<OneHotTargets<A>> {
    let mut m = Array2::zeros((labels.len(), n_classes));
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(CsadError::Validation(format!(
                "label {l} at row {i} outside 0..{n_classes}"
            )));
        }
        m[[i, l]] = A::one();
    }
    Ok(OneHotTargets(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_images(n: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn idx_images_fixture_has_expected_shape() {
        let payload: Vec<u8> = (0..10 * 784).map(|i| (i % 256) as u8).collect();
        let bytes = idx_images(10, 28, 28, &payload);
        match parse_idx::<f32>(&bytes, "fixture").unwrap() {
            IdxPart::Images { images, .. } => {
                assert_eq!(images.dim(), (10, 784));
                assert!(images.iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert_eq!(images[[0, 255]], 1.0);
            }
            _ => panic!("expected images"),
        }
    }

    #[test]
    fn idx_labels_identity_payload() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&10u32.to_be_bytes());
        bytes.extend(0u8..10);
        match parse_idx::<f64>(&bytes, "labels").unwrap() {
            IdxPart::Labels(l) => assert_eq!(l, (0u8..10).collect::<Vec<_>>()),
            _ => panic!("expected labels"),
        }
    }

    #[test]
    fn idx_bad_magic_is_format_error() {
        let mut bytes = idx_images(1, 1, 1, &[0]);
        bytes[3] = 0x04;
        assert!(matches!(
            parse_idx::<f32>(&bytes, "x"),
            Err(CsadError::Format { .. })
        ));
    }

    #[test]
    fn idx_truncated_payload_is_length_error() {
        let bytes = idx_images(2, 28, 28, &[0u8; 784]);
        assert!(matches!(
            parse_idx::<f32>(&bytes, "x"),
            Err(CsadError::LengthMismatch {
                expected: 1568,
                found: 784,
                ..
            })
        ));
    }

    #[test]
    fn cifar_two_record_batch() {
        let mut bytes = vec![3u8];
        bytes.extend(std::iter::repeat(255u8).take(CIFAR_PIXELS));
        bytes.push(7);
        bytes.extend(std::iter::repeat(0u8).take(CIFAR_PIXELS));
        let (labels, pixels) = parse_cifar_batch(&bytes, "b").unwrap();
        assert_eq!(labels, vec![3, 7]);
        let ds = RawDataset::<f32>::from_bytes(
            DatasetId::Cifar10,
            Split::Train,
            ImageShape::new(3, 32, 32),
            &pixels,
            labels,
        )
        .unwrap();
        assert_eq!(ds.images().dim(), (2, 3072));
        assert!(ds.images().row(0).iter().all(|&v| v == 1.0));
        assert!(ds.images().row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cifar_bad_size_is_format_error() {
        assert!(matches!(
            parse_cifar_batch(&[0u8; 3074], "b"),
            Err(CsadError::Format { .. })
        ));
    }

    #[test]
    fn cifar_directory_loads_train_and_test() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"]
            .iter()
            .enumerate()
        {
            let mut rec = vec![(i % 10) as u8];
            rec.extend(std::iter::repeat(i as u8).take(CIFAR_PIXELS));
            std::fs::write(dir.path().join(name), rec).unwrap();
        }
        let (train, test) = load_cifar10::<f32>(dir.path()).unwrap();
        assert_eq!(train.len(), 5);
        assert_eq!(test.len(), 1);
        assert_eq!(train.labels(), &[0, 1, 2, 3, 4]);
        assert_eq!(test.labels(), &[5]);
    }

    #[test]
    fn one_hot_examples() {
        let t = one_hot::<f64>(&[0], 2).unwrap();
        assert_eq!(t.matrix(), &ndarray::arr2(&[[1.0, 0.0]]));
        let t = one_hot::<f64>(&[1, 1, 0], 2).unwrap();
        assert_eq!(
            t.matrix(),
            &ndarray::arr2(&[[0.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
        );
        assert!(matches!(
            one_hot::<f64>(&[2], 2),
            Err(CsadError::Validation(_))
        ));
    }

    #[test]
    fn labels_out_of_range_rejected() {
        let r = RawDataset::<f32>::from_bytes(
            DatasetId::Mnist,
            Split::Train,
            ImageShape::new(1, 1, 1),
            &[0],
            vec![10],
        );
        assert!(matches!(r, Err(CsadError::Validation(_))));
    }

    #[test]
    fn identical_bytes_give_identical_hash() {
        let mk = || {
            RawDataset::<f32>::from_bytes(
                DatasetId::Mnist,
                Split::Train,
                ImageShape::new(1, 2, 2),
                &[1, 2, 3, 4],
                vec![1],
            )
            .unwrap()
        };
        assert_eq!(mk().content_hash(), mk().content_hash());
    }

    proptest::proptest! {
        #[test]
        fn one_hot_argmax_round_trip(labels in proptest::collection::vec(0usize..10, 0..200)) {
            let t = one_hot::<f32>(&labels, 10).unwrap();
            for row in t.matrix().rows() {
                proptest::prop_assert_eq!(row.sum(), 1.0);
            }
            proptest::prop_assert_eq!(t.argmax(), labels);
        }
    }
}
