//! IDX container (big-endian header, raw unsigned-byte payload).

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unsigned-byte, 3 dimensions.
pub const IMAGE_MAGIC: u32 = 0x0000_0803;
/// Unsigned-byte, 1 dimension.
pub const LABEL_MAGIC: u32 = 0x0000_0801;

const UBYTE: u8 = 0x08;

/// A parsed unsigned-byte IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        ((UBYTE as u32) << 8) | self.dims.len() as u32
    }

    /// Parses `bytes`, requiring the header magic to equal `magic`.
    pub fn parse(bytes: &[u8], magic: u32) -> Result<Self> {
        let word = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| Error::Format {
                    offset: bytes.len() as u64,
                    message: format!("truncated header: need 4 bytes at offset {at}"),
                })
        };
        let found = word(0)?;
        if found != magic {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
            });
        }
        let ndims = (found & 0xff) as usize;
        let mut dims = Vec::with_capacity(ndims);
        for d in 0..ndims {
            dims.push(word(4 + 4 * d)? as usize);
        }
        let start = 4 + 4 * ndims;
        let len: usize = dims.iter().product();
        let available = bytes.len() - start;
        if available < len {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: format!("truncated payload: header declares {len} bytes, {available} present"),
            });
        }
        Ok(Self {
            dims,
            data: bytes[start..start + len].to_vec(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

/// Pixel byte to data scale: `b / 127.5 - 1`.
pub fn byte_to_unit(b: u8) -> f32 {
    (b as f64 / 127.5 - 1.0) as f32
}

/// Inverse of [`byte_to_unit`], rounding to the nearest byte.
pub fn unit_to_byte(x: f32) -> u8 {
    ((x as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image file and a label file into a [`Dataset`] with 10 classes.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = IdxArray::parse(&read(images_path)?, IMAGE_MAGIC)?;
    let labels = IdxArray::parse(&read(labels_path)?, LABEL_MAGIC)?;
    if images.dims[0] != labels.dims[0] {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} images but {} labels", images.dims[0], labels.dims[0]),
        });
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    let pixels = images.data.iter().map(|&b| byte_to_unit(b)).collect();
    let tensor = Tensor::new(vec![n, h, w, 1], pixels)?;
    let split = images_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let labels = labels.data.iter().map(|&b| b as usize).collect();
    Dataset::new(tensor, labels, 10, split)
}

/// Writes a single-channel dataset back to an image and a label IDX file.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = dataset.images.shape();
    if shape[3] != 1 {
        return Err(Error::dim("write_idx channels", shape, &[shape[0], shape[1], shape[2], 1]));
    }
    let images = IdxArray {
        dims: vec![shape[0], shape[1], shape[2]],
        data: dataset.images.data().iter().map(|&x| unit_to_byte(x)).collect(),
    };
    let labels = IdxArray {
        dims: vec![dataset.len()],
        data: dataset.labels.iter().map(|&y| y as u8).collect(),
    };
    fs::write(images_path, images.encode()).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, labels.encode()).map_err(|e| Error::io(labels_path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

/// Loads an MNIST split from `dir`, keeping the first `limit` samples.
pub fn load_mnist(dir: &Path, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let (images, labels) = split.file_names();
    let mut ds = load_idx(&dir.join(images), &dir.join(labels))?;
    if let Some(n) = limit {
        ds = ds.take(n);
    }
    ds.split = match split {
        Split::Train => "mnist-train".into(),
        Split::Test => "mnist-test".into(),
    };
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_decode() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0x27, 0x10, 0, 0, 0, 0x1c, 0, 0, 0, 0x1c];
        bytes.resize(16 + 10000 * 784, 7);
        let a = IdxArray::parse(&bytes, IMAGE_MAGIC).unwrap();
        assert_eq!(a.dims, vec![10000, 28, 28]);
        assert_eq!(a.encode(), bytes);
    }

    #[test]
    fn pixel_endpoints() {
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
        for b in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(b)), b);
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 5];
        let err = IdxArray::parse(&bytes, LABEL_MAGIC).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 5, 1, 2];
        let err = IdxArray::parse(&bytes, LABEL_MAGIC).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 10, .. }));
        let err = IdxArray::parse(&[0, 0, 8], LABEL_MAGIC).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = IdxArray { dims: vec![2, 2, 2], data: vec![0; 8] };
        let lab = IdxArray { dims: vec![3], data: vec![0; 3] };
        fs::write(dir.path().join("i"), img.encode()).unwrap();
        fs::write(dir.path().join("l"), lab.encode()).unwrap();
        let err = load_idx(&dir.path().join("i"), &dir.path().join("l")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = IdxArray { dims: vec![3, 2, 2], data: (0..12).map(|i| (i * 23) as u8).collect() };
        let lab = IdxArray { dims: vec![3], data: vec![4, 0, 9] };
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, img.encode()).unwrap();
        fs::write(&lp, lab.encode()).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        let (ip2, lp2) = (dir.path().join("i2"), dir.path().join("l2"));
        write_idx(&ds, &ip2, &lp2).unwrap();
        assert_eq!(fs::read(ip).unwrap(), fs::read(ip2).unwrap());
        assert_eq!(fs::read(lp).unwrap(), fs::read(lp2).unwrap());
    }
}
