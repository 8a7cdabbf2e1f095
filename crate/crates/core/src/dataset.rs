//! Raw 28x28 grayscale datasets: NPZ ingestion and the flat on-disk format.
//!
//! The flat format is one directory holding, for each split,
//! `<split>_images.u8` (N*28*28 bytes, row-major) and `<split>_labels.u8`
//! (N bytes), plus a `meta.json` recording counts and SHA-256 checksums.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{write_atomic, write_atomic_str};
use crate::model::{IMAGE_PIXELS, IMAGE_SIDE, NUM_CLASSES};
use crate::npz::{write_npz, NpzArchive, U8Array};

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];
const FLAT_FORMAT: &str = "pneumonet-flat-v1";

/// Labeled images of one split; pixel bytes are concatenated row-major.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Split {
    pub fn new(images: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let split = Split { images, labels };
        split.validate("split")?;
        Ok(split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.images.len() != self.labels.len() * IMAGE_PIXELS {
            return Err(Error::invariant(format!(
                "{name}: {} image bytes for {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if let Some(pos) = self.labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
            return Err(Error::invariant(format!(
                "{name}: label {} at index {pos} is not 0 or 1",
                self.labels[pos]
            )));
        }
        Ok(())
    }
}

/// Train, validation and test splits with 0 = normal, 1 = pneumonia.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawDataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct SplitMeta {
    count: usize,
    images_sha256: String,
    labels_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct FlatMeta {
    format: String,
    image_side: usize,
    train: SplitMeta,
    val: SplitMeta,
    test: SplitMeta,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RawDataset {
    pub fn split(&self, name: &str) -> Option<&Split> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn splits(&self) -> [(&'static str, &Split); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    /// Decodes an NPZ archive with `{train,val,test}_{images,labels}` members.
    pub fn from_npz_bytes(bytes: &[u8]) -> Result<Self> {
        let archive = NpzArchive::parse(bytes)?;
        let mut splits = Vec::with_capacity(3);
        for name in SPLIT_NAMES {
            let images = archive.array(&format!("{name}_images"))?;
            let labels = archive.array(&format!("{name}_labels"))?;
            let n = match images.shape.as_slice() {
                [n, h, w] if *h == IMAGE_SIDE && *w == IMAGE_SIDE => *n,
                [n, h, w, 1] if *h == IMAGE_SIDE && *w == IMAGE_SIDE => *n,
                other => {
                    return Err(Error::format(
                        format!("{name}_images.npy"),
                        0,
                        format!("expected shape (N, 28, 28), found {other:?}"),
                    ))
                }
            };
            let label_ok = matches!(labels.shape.as_slice(), [m] if *m == n)
                || matches!(labels.shape.as_slice(), [m, 1] if *m == n);
            if !label_ok {
                return Err(Error::format(
                    format!("{name}_labels.npy"),
                    0,
                    format!("expected shape ({n},) or ({n}, 1), found {:?}", labels.shape),
                ));
            }
            let split = Split {
                images: images.data,
                labels: labels.data,
            };
            split.validate(&format!("{name}_labels.npy")).map_err(|e| {
                Error::format(format!("{name}_labels.npy"), 0, e.to_string())
            })?;
            splits.push(split);
        }
        let test = splits.pop().unwrap();
        let val = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(RawDataset { train, val, test })
    }

    pub fn ingest_npz(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_npz_bytes(&bytes)
    }

    pub fn to_npz_bytes(&self) -> Vec<u8> {
        let mut arrays = Vec::new();
        for (name, split) in self.splits() {
            arrays.push((
                format!("{name}_images"),
                U8Array {
                    shape: vec![split.len(), IMAGE_SIDE, IMAGE_SIDE],
                    data: split.images.clone(),
                },
            ));
            arrays.push((
                format!("{name}_labels"),
                U8Array {
                    shape: vec![split.len(), 1],
                    data: split.labels.clone(),
                },
            ));
        }
        let refs: Vec<(&str, &U8Array)> = arrays.iter().map(|(n, a)| (n.as_str(), a)).collect();
        write_npz(&refs)
    }

    /// Writes the flat format into `dir`; returns the meta JSON text.
    pub fn export_flat(&self, dir: impl AsRef<Path>) -> Result<String> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut metas = Vec::new();
        for (name, split) in self.splits() {
            write_atomic(&dir.join(format!("{name}_images.u8")), &split.images)?;
            write_atomic(&dir.join(format!("{name}_labels.u8")), &split.labels)?;
            metas.push(SplitMeta {
                count: split.len(),
                images_sha256: sha256_hex(&split.images),
                labels_sha256: sha256_hex(&split.labels),
            });
        }
        let test = metas.pop().unwrap();
        let val = metas.pop().unwrap();
        let train = metas.pop().unwrap();
        let meta = FlatMeta {
            format: FLAT_FORMAT.to_string(),
            image_side: IMAGE_SIDE,
            train,
            val,
            test,
        };
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
        write_atomic_str(&dir.join("meta.json"), &text)?;
        Ok(text)
    }

    pub fn load_flat(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: FlatMeta = serde_json::from_str(&text)
            .map_err(|e| Error::format("meta.json", e.column() as u64, e.to_string()))?;
        if meta.format != FLAT_FORMAT || meta.image_side != IMAGE_SIDE {
            return Err(Error::format(
                "meta.json",
                0,
                format!("unsupported format {} / side {}", meta.format, meta.image_side),
            ));
        }
        let read = |file: String, expected_len: usize, checksum: &str| -> Result<Vec<u8>> {
            let path = dir.join(&file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != expected_len {
                return Err(Error::format(
                    file,
                    bytes.len() as u64,
                    format!("meta.json declares {expected_len} bytes, file has {}", bytes.len()),
                ));
            }
            let actual = sha256_hex(&bytes);
            if actual != checksum {
                return Err(Error::format(
                    file,
                    0,
                    format!("checksum mismatch: {actual} != {checksum}"),
                ));
            }
            Ok(bytes)
        };
        let load = |name: &str, m: &SplitMeta| -> Result<Split> {
            let images = read(format!("{name}_images.u8"), m.count * IMAGE_PIXELS, &m.images_sha256)?;
            let labels = read(format!("{name}_labels.u8"), m.count, &m.labels_sha256)?;
            let split = Split { images, labels };
            split
                .validate(name)
                .map_err(|e| Error::format(format!("{name}_labels.u8"), 0, e.to_string()))?;
            Ok(split)
        };
        Ok(RawDataset {
            train: load("train", &meta.train)?,
            val: load("val", &meta.val)?,
            test: load("test", &meta.test)?,
        })
    }

    /// Loads `path` as an NPZ file or a flat directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.is_dir() {
            Self::load_flat(path)
        } else {
            Self::ingest_npz(path)
        }
    }

    pub fn checksums(&self) -> Vec<(String, String)> {
        self.splits()
            .iter()
            .flat_map(|(name, s)| {
                [
                    (format!("{name}_images"), sha256_hex(&s.images)),
                    (format!("{name}_labels"), sha256_hex(&s.labels)),
                ]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RawDataset {
        let split = |n: usize, salt: u8| Split {
            images: (0..n * IMAGE_PIXELS).map(|i| (i as u8).wrapping_mul(salt)).collect(),
            labels: (0..n).map(|i| (i % 2) as u8).collect(),
        };
        RawDataset {
            train: split(5, 3),
            val: split(2, 5),
            test: split(3, 7),
        }
    }

    #[test]
    fn npz_round_trip() {
        let ds = tiny();
        let back = RawDataset::from_npz_bytes(&ds.to_npz_bytes()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn flat_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        ds.export_flat(dir.path()).unwrap();
        assert_eq!(RawDataset::load_flat(dir.path()).unwrap(), ds);
    }

    #[test]
    fn flat_checksum_and_count_are_verified() {
        let dir = tempfile::tempdir().unwrap();
        tiny().export_flat(dir.path()).unwrap();
        let p = dir.path().join("test_images.u8");
        let mut bytes = fs::read(&p).unwrap();
        bytes[10] ^= 1;
        fs::write(&p, &bytes).unwrap();
        let err = RawDataset::load_flat(dir.path()).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");

        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        let err = RawDataset::load_flat(dir.path()).unwrap_err().to_string();
        assert!(err.contains("declares"), "{err}");
    }

    #[test]
    fn npz_with_bad_labels_is_rejected() {
        let mut ds = tiny();
        ds.val.labels[0] = 7;
        let err = RawDataset::from_npz_bytes(&ds.to_npz_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "val_labels.npy"));
    }
}
