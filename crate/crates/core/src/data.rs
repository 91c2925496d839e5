//! MNIST / Fashion-MNIST ingestion from IDX files.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_SIDE: usize = 28;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Fmnist,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Fmnist => "fmnist",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One image per row, pixels in `[0, 1]`.
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub name: DatasetName,
}

impl Dataset {
    pub fn new(images: Matrix, labels: Vec<usize>, name: DatasetName) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Dimension {
                context: "dataset labels",
                expected: images.rows(),
                found: labels.len(),
            });
        }
        if images.as_slice().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("dataset pixel outside [0, 1]".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::Label {
                label,
                classes: NUM_CLASSES,
            });
        }
        Ok(Self {
            images,
            labels,
            name,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// Rows and labels for the given indices, in order.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.images.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset {
            images,
            labels,
            name: self.name,
        }
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut inflated = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut inflated)
            .map_err(|e| Error::io(path, e))?;
        Ok(inflated)
    } else {
        Ok(bytes)
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path, field: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx {
            path: path.to_path_buf(),
            field,
            message: "file truncated in header".into(),
        })
}

fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, path, "magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Idx {
            path: path.to_path_buf(),
            field: "magic",
            message: format!("expected {IMAGE_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let n = read_u32(bytes, 4, path, "count")? as usize;
    for (at, field) in [(8, "rows"), (12, "cols")] {
        let side = read_u32(bytes, at, path, field)? as usize;
        if side != IMAGE_SIDE {
            return Err(Error::Idx {
                path: path.to_path_buf(),
                field,
                message: format!("expected {IMAGE_SIDE}, found {side}"),
            });
        }
    }
    let need = n * IMAGE_SIDE * IMAGE_SIDE;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Idx {
            path: path.to_path_buf(),
            field: "pixels",
            message: format!("truncated: expected {need} bytes, found {}", body.len()),
        });
    }
    Ok((n, body[..need].to_vec()))
}

fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, path, "magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Idx {
            path: path.to_path_buf(),
            field: "magic",
            message: format!("expected {LABEL_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let n = read_u32(bytes, 4, path, "count")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Idx {
            path: path.to_path_buf(),
            field: "labels",
            message: format!("truncated: expected {n} bytes, found {}", body.len()),
        });
    }
    let labels: Vec<usize> = body[..n].iter().map(|&b| b as usize).collect();
    if let Some(pos) = labels.iter().position(|&l| l >= NUM_CLASSES) {
        return Err(Error::Idx {
            path: path.to_path_buf(),
            field: "labels",
            message: format!("label {} at index {pos} is not a class", labels[pos]),
        });
    }
    Ok(labels)
}

/// Reads an image/label IDX pair (optionally gzip-compressed). Pixels are
/// scaled by 1/255.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    name: DatasetName,
) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (n, pixels) = parse_images(&open_maybe_gz(ip)?, ip)?;
    let labels = parse_labels(&open_maybe_gz(lp)?, lp)?;
    if labels.len() != n {
        return Err(Error::Idx {
            path: lp.to_path_buf(),
            field: "count",
            message: format!("{} labels for {n} images", labels.len()),
        });
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let images = Matrix::new(n, IMAGE_SIDE * IMAGE_SIDE, data)?;
    Ok(Dataset {
        images,
        labels,
        name,
    })
}

/// Writes raw 8-bit images and labels as an uncompressed IDX pair.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    let side2 = IMAGE_SIDE * IMAGE_SIDE;
    if pixels.len() != labels.len() * side2 {
        return Err(Error::Dimension {
            context: "IDX pixels",
            expected: labels.len() * side2,
            found: pixels.len(),
        });
    }
    let n = labels.len() as u32;
    let mut img = Vec::with_capacity(16 + pixels.len());
    for word in [IMAGE_MAGIC, n, IMAGE_SIDE as u32, IMAGE_SIDE as u32] {
        img.extend_from_slice(&word.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for word in [LABEL_MAGIC, n] {
        lab.extend_from_slice(&word.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    for (path, bytes) in [(images_path.as_ref(), img), (labels_path.as_ref(), lab)] {
        File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// `<data_dir>/<name>` when it exists, otherwise `data_dir` itself.
pub fn dataset_dir(data_dir: &Path, name: DatasetName) -> PathBuf {
    let nested = data_dir.join(name.as_str());
    if nested.is_dir() {
        nested
    } else {
        data_dir.to_path_buf()
    }
}

fn find_file(dir: &Path, stem: &str) -> PathBuf {
    let plain = dir.join(stem);
    if plain.exists() {
        plain
    } else {
        dir.join(format!("{stem}.gz"))
    }
}

/// Loads one split from the four standard file names, gzip'd or not.
pub fn load_split(data_dir: &Path, name: DatasetName, split: Split) -> Result<Dataset> {
    let dir = dataset_dir(data_dir, name);
    let prefix = split.prefix();
    load_idx(
        find_file(&dir, &format!("{prefix}-images-idx3-ubyte")),
        find_file(&dir, &format!("{prefix}-labels-idx1-ubyte")),
        name,
    )
}

/// Seeded shuffle of `0..len` cut into `ceil(len / batch_size)` batches.
pub fn shuffled_batches<R: Rng>(len: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn batches(ds: &Dataset, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    shuffled_batches(ds.len(), batch_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Seeded permutation of `0..len`.
pub fn permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        Dataset::new(Matrix::zeros(n, 2), vec![0; n], DatasetName::Mnist).unwrap()
    }

    #[test]
    fn batch_sizes() {
        let sizes = |n| batches(&toy(n), 64, 1).iter().map(Vec::len).collect::<Vec<_>>();
        assert_eq!(sizes(10), vec![10]);
        assert_eq!(sizes(130), vec![64, 64, 2]);
        assert!(sizes(0).is_empty());
    }

    #[test]
    fn batches_partition_every_index_once() {
        let parts = batches(&toy(1000), 64, 7);
        let mut seen: Vec<usize> = parts.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..1000).collect::<Vec<_>>());
        assert_eq!(parts, batches(&toy(1000), 64, 7));
        assert_ne!(parts, batches(&toy(1000), 64, 8));
    }

    #[test]
    fn idx_fixture_round_trips_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let mut pixels = vec![0u8; 2 * 784];
        pixels[0] = 255;
        pixels[784 + 5] = 128;
        write_idx(&ip, &lp, &pixels, &[3, 9]).unwrap();
        let before = (std::fs::read(&ip).unwrap(), std::fs::read(&lp).unwrap());

        let ds = load_idx(&ip, &lp, DatasetName::Mnist).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 9]);
        assert_eq!(ds.image(0)[0], 1.0);
        assert_eq!(ds.image(0)[1], 0.0);

        let raw: Vec<u8> = ds.images.as_slice().iter().map(|p| (p * 255.0).round() as u8).collect();
        let labels: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
        write_idx(&ip, &lp, &raw, &labels).unwrap();
        assert_eq!(before, (std::fs::read(&ip).unwrap(), std::fs::read(&lp).unwrap()));
    }

    #[test]
    fn gzip_inputs_are_inflated() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&ip, &lp, &[7u8; 784], &[1]).unwrap();
        let gz = dir.path().join("img.gz");
        let mut enc = GzEncoder::new(File::create(&gz).unwrap(), flate2::Compression::fast());
        enc.write_all(&std::fs::read(&ip).unwrap()).unwrap();
        enc.finish().unwrap();
        let ds = load_idx(&gz, &lp, DatasetName::Fmnist).unwrap();
        assert_eq!(ds.image(0)[3], 7.0 / 255.0);
    }

    #[test]
    fn malformed_files_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&ip, &lp, &[0u8; 784 * 2], &[1, 2]).unwrap();

        let mut bad = std::fs::read(&ip).unwrap();
        bad[3] = 0x01;
        let bad_path = dir.path().join("bad");
        std::fs::write(&bad_path, &bad).unwrap();
        assert!(matches!(load_idx(&bad_path, &lp, DatasetName::Mnist), Err(Error::Idx { field: "magic", .. })));

        let truncated = std::fs::read(&ip).unwrap()[..100].to_vec();
        std::fs::write(&bad_path, truncated).unwrap();
        assert!(matches!(load_idx(&bad_path, &lp, DatasetName::Mnist), Err(Error::Idx { field: "pixels", .. })));

        let lp1 = dir.path().join("lab1");
        write_idx(dir.path().join("unused"), &lp1, &[0u8; 784], &[4]).unwrap();
        assert!(matches!(load_idx(&ip, &lp1, DatasetName::Mnist), Err(Error::Idx { field: "count", .. })));
    }
}
