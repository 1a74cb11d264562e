//! Datasets: MNIST IDX and CIFAR-10 binary loaders, Gaussian blobs, and a
//! versioned binary cache.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Shape};
use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CACHE_MAGIC: &[u8; 8] = b"ADVPRDS\0";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Mnist,
    Cifar10,
    Toy,
    SyntheticBlobs,
}

impl Provenance {
    fn code(self) -> u8 {
        match self {
            Provenance::Mnist => 0,
            Provenance::Cifar10 => 1,
            Provenance::Toy => 2,
            Provenance::SyntheticBlobs => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Provenance::Mnist,
            1 => Provenance::Cifar10,
            2 => Provenance::Toy,
            3 => Provenance::SyntheticBlobs,
            _ => return None,
        })
    }
}

/// Labelled examples with stable ids. Image data keeps its raw bytes so
/// the cache round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    provenance: Provenance,
    shape: Shape,
    classes: usize,
    ids: Vec<u64>,
    labels: Vec<usize>,
    features: Vec<f32>,
    raw: Option<Vec<u8>>,
}

impl Dataset {
    pub fn new(
        provenance: Provenance,
        shape: Shape,
        classes: usize,
        ids: Vec<u64>,
        labels: Vec<usize>,
        features: Vec<f32>,
    ) -> Result<Self> {
        let ds = Self {
            provenance,
            shape,
            classes,
            ids,
            labels,
            features,
            raw: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Image data from bytes, scaled by 1/255.
    pub fn from_bytes(
        provenance: Provenance,
        shape: Shape,
        classes: usize,
        ids: Vec<u64>,
        labels: Vec<usize>,
        raw: Vec<u8>,
    ) -> Result<Self> {
        let features = raw.iter().map(|&b| f32::from(b) / 255.0).collect();
        let ds = Self {
            provenance,
            shape,
            classes,
            ids,
            labels,
            features,
            raw: Some(raw),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let per = self.example_len();
        if self.labels.len() != self.ids.len() || self.features.len() != per * self.ids.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.ids.len(), self.shape[0], self.shape[1], self.shape[2]],
                found: vec![self.labels.len(), self.features.len()],
            });
        }
        if let Some((index, &label)) =
            self.labels.iter().enumerate().find(|(_, &l)| l >= self.classes)
        {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                classes: self.classes,
            });
        }
        let mut seen = std::collections::HashSet::with_capacity(self.ids.len());
        for &id in &self.ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(())
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn example_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn example(&self, pos: usize) -> &[f32] {
        let per = self.example_len();
        &self.features[pos * per..(pos + 1) * per]
    }

    /// Mini-batch of the examples at `positions`.
    pub fn batch(&self, positions: &[usize]) -> Result<Batch<f32>> {
        let per = self.example_len();
        let mut x = Vec::with_capacity(per * positions.len());
        for &p in positions {
            x.extend_from_slice(self.example(p));
        }
        let y = positions.iter().map(|&p| self.labels[p]).collect();
        Batch::new(x, y, self.shape, self.classes)
    }

    /// Examples at `positions`, in the given order, keeping their ids.
    pub fn subset(&self, positions: &[usize]) -> Self {
        let per = self.example_len();
        let mut features = Vec::with_capacity(per * positions.len());
        let mut raw = self.raw.as_ref().map(|_| Vec::with_capacity(per * positions.len()));
        for &p in positions {
            features.extend_from_slice(self.example(p));
            if let (Some(dst), Some(src)) = (raw.as_mut(), self.raw.as_ref()) {
                dst.extend_from_slice(&src[p * per..(p + 1) * per]);
            }
        }
        Self {
            provenance: self.provenance,
            shape: self.shape,
            classes: self.classes,
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            features,
            raw,
        }
    }

    /// The first `n` examples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    pub fn id_positions(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(p, &id)| (id, p)).collect()
    }

    /// Keeps the examples whose ids are listed, in dataset order. Every id
    /// must exist.
    pub fn retain_ids(&self, ids: &[u64]) -> Result<Self> {
        let index = self.id_positions();
        let mut keep = vec![false; self.len()];
        for id in ids {
            let &p = index.get(id).ok_or(Error::UnknownId(*id))?;
            keep[p] = true;
        }
        let positions: Vec<usize> = (0..self.len()).filter(|&p| keep[p]).collect();
        Ok(self.subset(&positions))
    }

    /// Serializes to the cache format.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.len() * (12 + self.example_len() * 4));
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.push(self.provenance.code());
        out.push(u8::from(self.raw.is_some()));
        for v in [self.classes, self.shape[0], self.shape[1], self.shape[2]] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for &id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        match &self.raw {
            Some(raw) => out.extend_from_slice(raw),
            None => {
                for &f in &self.features {
                    out.extend_from_slice(&f.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_cache_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        let magic = r.take(8, "cache magic")?;
        if magic != CACHE_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: u32::from_be_bytes(CACHE_MAGIC[..4].try_into().unwrap()),
                found: u32::from_be_bytes(magic[..4].try_into().unwrap()),
            });
        }
        let version = r.u32_le()?;
        if version != CACHE_VERSION {
            return Err(Error::config(format!(
                "{}: unsupported cache version {version}",
                path.display()
            )));
        }
        let prov = r.take(1, "provenance")?[0];
        let provenance = Provenance::from_code(prov)
            .ok_or_else(|| Error::config(format!("unknown provenance code {prov}")))?;
        let has_raw = r.take(1, "encoding")?[0] != 0;
        let classes = r.u32_le()? as usize;
        let shape = [r.u32_le()? as usize, r.u32_le()? as usize, r.u32_le()? as usize];
        let n = r.u64_le()? as usize;
        let ids = (0..n).map(|_| r.u64_le()).collect::<Result<Vec<_>>>()?;
        let labels = (0..n)
            .map(|_| r.u32_le().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let per = shape.iter().product::<usize>();
        let ds = if has_raw {
            let raw = r.take(n * per, "pixel payload")?.to_vec();
            Self::from_bytes(provenance, shape, classes, ids, labels, raw)?
        } else {
            let payload = r.take(n * per * 4, "feature payload")?;
            let features = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Self::new(provenance, shape, classes, ids, labels, features)?
        };
        Ok(ds)
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_cache_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_cache_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.into(),
                offset: self.bytes.len() as u64,
                detail: format!("{what} needs {n} bytes from offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, "header")?.try_into().unwrap()))
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, "header")?.try_into().unwrap()))
    }

    fn u64_le(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, "header")?.try_into().unwrap()))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses a big-endian IDX image file: magic, count, rows, cols, pixels.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = Reader::new(bytes, path);
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.take(n * rows * cols, "image payload")?.to_vec();
    Ok((n, rows, cols, pixels))
}

/// Parses a big-endian IDX label file: magic, count, labels.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut r = Reader::new(bytes, path);
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = r.u32_be()? as usize;
    Ok(r.take(n, "label payload")?.to_vec())
}

/// Loads an MNIST image/label file pair. Ids are record indices.
pub fn load_mnist(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images)?, images)?;
    let lab = parse_idx_labels(&read_file(labels)?, labels)?;
    if lab.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: lab.len(),
        });
    }
    if let Some((record, &label)) = lab.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(Error::BadRecordLabel {
            path: labels.into(),
            record,
            label,
            classes: 10,
        });
    }
    Dataset::from_bytes(
        Provenance::Mnist,
        [1, rows, cols],
        10,
        (0..n as u64).collect(),
        lab.into_iter().map(usize::from).collect(),
        pixels,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Loads MNIST from a directory holding the four standard (uncompressed)
/// files, accepting both `train-images-idx3-ubyte` and
/// `train-images.idx3-ubyte` spellings.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let find = |kind: &str, idx: &str| -> PathBuf {
        let dashed = dir.join(format!("{prefix}-{kind}-{idx}-ubyte"));
        if dashed.exists() {
            return dashed;
        }
        let dotted = dir.join(format!("{prefix}-{kind}.{idx}-ubyte"));
        if dotted.exists() {
            dotted
        } else {
            dashed
        }
    };
    load_mnist(&find("images", "idx3"), &find("labels", "idx1"))
}

/// Loads CIFAR-10 binary batches (3073-byte records: label, then 3072
/// channel-major pixels). Ids run consecutively across files.
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut raw = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            let complete = bytes.len() / CIFAR_RECORD;
            return Err(Error::Truncated {
                path: path.into(),
                offset: (complete * CIFAR_RECORD) as u64,
                detail: format!(
                    "{} bytes is not a multiple of the {CIFAR_RECORD}-byte record",
                    bytes.len()
                ),
            });
        }
        for (record, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] > 9 {
                return Err(Error::BadRecordLabel {
                    path: path.into(),
                    record,
                    label: rec[0],
                    classes: 10,
                });
            }
            labels.push(usize::from(rec[0]));
            raw.extend_from_slice(&rec[1..]);
        }
    }
    let n = labels.len() as u64;
    Dataset::from_bytes(Provenance::Cifar10, [3, 32, 32], 10, (0..n).collect(), labels, raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobsConfig {
    pub classes: usize,
    pub per_class: usize,
    /// Distance between consecutive centroids, which sit on the first axis.
    pub spacing: f64,
    pub spread: f64,
    pub dim: usize,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            per_class: 100,
            spacing: 4.0,
            spread: 0.5,
            dim: 2,
        }
    }
}

impl BlobsConfig {
    pub fn centroid(&self, class: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        c[0] = class as f64 * self.spacing;
        c
    }
}

/// Isotropic Gaussian blobs; example `i` of class `k` has id
/// `k * per_class + i`, examples grouped by class.
pub fn gen_blobs(cfg: &BlobsConfig, seed: u64) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.per_class == 0 || cfg.dim == 0 {
        return Err(Error::config("blobs need positive class count, size and dimension"));
    }
    if !(cfg.spread >= 0.0) || !cfg.spacing.is_finite() {
        return Err(Error::config("blob spread must be non-negative"));
    }
    let mut rng = rng::substream(seed, "blobs", 0);
    let n = cfg.classes * cfg.per_class;
    let mut features = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..cfg.classes {
        let c = cfg.centroid(k);
        for _ in 0..cfg.per_class {
            for &ci in &c {
                let z: f64 = rng.sample(StandardNormal);
                features.push((ci + cfg.spread * z) as f32);
            }
            labels.push(k);
        }
    }
    Dataset::new(
        Provenance::SyntheticBlobs,
        [1, 1, cfg.dim],
        cfg.classes,
        (0..n as u64).collect(),
        labels,
        features,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn mnist_fabricated_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut pixels = vec![0u8; 2 * 28 * 28];
        pixels[784..].iter_mut().for_each(|p| *p = 255);
        pixels[784] = 51;
        let im = write(dir.path(), "im", &idx_images(2, 28, 28, &pixels));
        let lb = write(dir.path(), "lb", &idx_labels(&[7, 0]));
        let ds = load_mnist(&im, &lb).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.shape(), [1, 28, 28]);
        assert_eq!(ds.labels(), &[7, 0]);
        assert!(ds.example(0).iter().all(|&v| v == 0.0));
        assert_eq!(ds.example(1)[0], 0.2);
        assert_eq!(ds.example(1)[1], 1.0);
    }

    #[test]
    fn mnist_bad_magic_names_observed_value() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = idx_images(1, 28, 28, &[0; 784]);
        bytes[2] = 0x08;
        bytes[3] = 0x00;
        let im = write(dir.path(), "im", &bytes);
        let lb = write(dir.path(), "lb", &idx_labels(&[1]));
        let err = load_mnist(&im, &lb).unwrap_err();
        assert!(matches!(err, Error::BadMagic { found: 0x0800, .. }));
        assert!(err.to_string().contains("bad magic 0x00000800"), "{err}");

        // swapped files: label file where images expected
        let err = load_mnist(&lb, &im).unwrap_err();
        assert!(matches!(err, Error::BadMagic { found: IDX_LABELS_MAGIC, .. }));
    }

    #[test]
    fn mnist_truncated_and_count_mismatch_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let im = write(dir.path(), "im", &idx_images(2, 28, 28, &[0; 784 + 100]));
        let lb = write(dir.path(), "lb", &idx_labels(&[1, 2]));
        assert!(matches!(load_mnist(&im, &lb), Err(Error::Truncated { .. })));

        let im = write(dir.path(), "im2", &idx_images(2, 28, 28, &[0; 2 * 784]));
        let lb = write(dir.path(), "lb2", &idx_labels(&[1, 2, 3]));
        assert!(matches!(
            load_mnist(&im, &lb),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
    }

    fn cifar_record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; CIFAR_RECORD];
        r[0] = label;
        r
    }

    #[test]
    fn cifar_records_and_guards() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = cifar_record(3, 255);
        bytes.extend(cifar_record(9, 0));
        let a = write(dir.path(), "a.bin", &bytes);
        let b = write(dir.path(), "b.bin", &cifar_record(0, 128));
        let ds = load_cifar10(&[&a, &b]).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.ids(), &[0, 1, 2]);
        assert_eq!(ds.labels(), &[3, 9, 0]);
        assert_eq!(ds.shape(), [3, 32, 32]);
        assert!(ds.example(0).iter().all(|&v| v == 1.0));

        let mut truncated = bytes.clone();
        truncated.truncate(CIFAR_RECORD + 10);
        let t = write(dir.path(), "t.bin", &truncated);
        match load_cifar10(&[&t]) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }

        let mut bad = bytes;
        bad.extend(cifar_record(11, 0));
        let p = write(dir.path(), "bad.bin", &bad);
        assert!(matches!(
            load_cifar10(&[&p]),
            Err(Error::BadRecordLabel { record: 2, label: 11, .. })
        ));
    }

    #[test]
    fn cache_round_trip_is_bit_exact() {
        let blobs = gen_blobs(&BlobsConfig::default(), 3).unwrap();
        let bytes = blobs.to_cache_bytes();
        let back = Dataset::from_cache_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, blobs);
        assert_eq!(back.to_cache_bytes(), bytes);

        let img = Dataset::from_bytes(
            Provenance::Mnist,
            [1, 2, 2],
            10,
            vec![5, 9],
            vec![1, 2],
            vec![0, 1, 2, 3, 250, 251, 252, 255],
        )
        .unwrap();
        let bytes = img.to_cache_bytes();
        let back = Dataset::from_cache_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_cache_bytes(), bytes);

        let mut broken = bytes.clone();
        broken[0] = b'X';
        assert!(matches!(
            Dataset::from_cache_bytes(&broken, Path::new("mem")),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            Dataset::from_cache_bytes(&bytes[..bytes.len() - 1], Path::new("mem")),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn blobs_are_seeded_and_collapse_to_centroids() {
        let cfg = BlobsConfig {
            classes: 3,
            per_class: 20,
            spacing: 2.5,
            spread: 0.0,
            dim: 3,
        };
        let a = gen_blobs(&cfg, 1).unwrap();
        assert_eq!(a, gen_blobs(&cfg, 1).unwrap());
        for p in 0..a.len() {
            let c = cfg.centroid(a.labels()[p]);
            for (x, ci) in a.example(p).iter().zip(&c) {
                assert_eq!(f64::from(*x), *ci);
            }
        }
        let noisy = BlobsConfig { spread: 1.0, ..cfg };
        assert_ne!(gen_blobs(&noisy, 1).unwrap(), gen_blobs(&noisy, 2).unwrap());
    }

    #[test]
    fn retain_ids_preserves_order_and_rejects_unknown() {
        let ds = gen_blobs(&BlobsConfig { per_class: 3, ..Default::default() }, 0).unwrap();
        let kept = ds.retain_ids(&[4, 1]).unwrap();
        assert_eq!(kept.ids(), &[1, 4]);
        assert_eq!(kept.example(0), ds.example(1));
        assert!(matches!(ds.retain_ids(&[99]), Err(Error::UnknownId(99))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = Dataset::new(Provenance::Toy, [1, 1, 1], 2, vec![1, 1], vec![0, 1], vec![0.0, 1.0]);
        assert!(matches!(r, Err(Error::DuplicateId(1))));
    }
}
