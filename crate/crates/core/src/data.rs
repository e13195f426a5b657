//! Datasets: MNIST IDX files and a synthetic task that needs long-range context.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// 8-bit images in `(count, H, W, C)` order with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub classes: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.h * self.w * self.c
    }

    /// Images scaled to `[0, 1]` and their labels, in the order of `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(
                self.images[i * n..(i + 1) * n]
                    .iter()
                    .map(|&p| f64::from(p) / 255.0),
            );
        }
        let labels = indices
            .iter()
            .map(|&i| usize::from(self.labels[i]))
            .collect();
        let t = Tensor::new(vec![indices.len(), self.h, self.w, self.c], data)
            .expect("consistent batch");
        (t, labels)
    }

    /// The first `count` examples.
    pub fn take(&self, count: usize) -> Dataset {
        let count = count.min(self.len());
        Dataset {
            images: self.images[..count * self.image_len()].to_vec(),
            labels: self.labels[..count].to_vec(),
            ..self.clone()
        }
    }
}

// ----------------------------------------------------------------------
// MNIST
// ----------------------------------------------------------------------

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    offset: usize,
}

impl IdxReader<'_> {
    fn err(&self, msg: String) -> Error {
        Error::Parse {
            path: self.path.display().to_string(),
            offset: self.offset as u64,
            msg,
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self
            .bytes
            .get(self.offset..self.offset + 4)
            .ok_or_else(|| self.err("truncated header".into()))?;
        self.offset += 4;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let got = self.u32()?;
        if got != expected {
            self.offset -= 4;
            return Err(self.err(format!(
                "bad magic: expected {expected:#010x}, found {got:#010x}"
            )));
        }
        Ok(())
    }

    fn body(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.offset + len;
        if end > self.bytes.len() {
            return Err(self.err(format!(
                "truncated data: need {len} bytes, {} available",
                self.bytes.len() - self.offset
            )));
        }
        Ok(&self.bytes[self.offset..end])
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parses an IDX image file (`0x00000803`) into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = IdxReader {
        path,
        bytes,
        offset: 0,
    };
    r.magic(IMAGE_MAGIC)?;
    let (n, rows, cols) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let pixels = r.body(n * rows * cols)?.to_vec();
    Ok((n, rows, cols, pixels))
}

/// Parses an IDX label file (`0x00000801`).
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = IdxReader {
        path,
        bytes,
        offset: 0,
    };
    r.magic(LABEL_MAGIC)?;
    let n = r.u32()? as usize;
    Ok(r.body(n)?.to_vec())
}

/// Loads one image/label file pair.
pub fn load_mnist(images: &Path, labels: &Path, split: &str) -> Result<Dataset> {
    let (n, h, w, pixels) = parse_idx_images(images, &read_file(images)?)?;
    let labels_v = parse_idx_labels(labels, &read_file(labels)?)?;
    if labels_v.len() != n {
        return Err(Error::Parse {
            path: labels.display().to_string(),
            offset: 4,
            msg: format!("{} labels for {n} images", labels_v.len()),
        });
    }
    if let Some(pos) = labels_v.iter().position(|&l| l >= 10) {
        return Err(Error::Parse {
            path: labels.display().to_string(),
            offset: 8 + pos as u64,
            msg: format!("label {} out of range", labels_v[pos]),
        });
    }
    Ok(Dataset {
        split: split.to_string(),
        h,
        w,
        c: 1,
        classes: 10,
        images: pixels,
        labels: labels_v,
    })
}

/// Loads `train` or `test` from a directory holding the standard file names.
pub fn load_mnist_split(dir: &Path, split: &str) -> Result<Dataset> {
    let prefix = match split {
        "train" => "train",
        "test" => "t10k",
        other => return Err(Error::Config(format!("unknown MNIST split {other:?}"))),
    };
    load_mnist(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

/// `$LIGHTNL_MNIST_DIR` if set, else `data/mnist` under `root`.
pub fn mnist_dir(root: &Path) -> PathBuf {
    std::env::var_os("LIGHTNL_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| root.join("data").join("mnist"))
}

// ----------------------------------------------------------------------
// Long-range XOR task
// ----------------------------------------------------------------------

pub const PATCH: usize = 3;
const PATCH_MARGIN: usize = 1;
const NOISE_MAX: u8 = 76;

/// Noisy `size x size` images with optional bright 3x3 patches near the
/// top-left and bottom-right corners. The label is the XOR of the two
/// presences, so a classifier must relate opposite corners. The four patch
/// configurations appear equally often.
pub fn gen_longrange(seed: u64, count: usize, size: usize) -> Result<Dataset> {
    if size < 16 {
        return Err(Error::Config(format!(
            "long-range images need size >= 16, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut configs: Vec<u8> = (0..count).map(|i| (i % 4) as u8).collect();
    configs.shuffle(&mut rng);
    let mut images = vec![0u8; count * size * size];
    let mut labels = Vec::with_capacity(count);
    let far = size - PATCH_MARGIN - PATCH;
    for (i, &cfg) in configs.iter().enumerate() {
        let img = &mut images[i * size * size..(i + 1) * size * size];
        img.iter_mut()
            .for_each(|p| *p = rng.random_range(0..=NOISE_MAX));
        let (a, b) = (cfg & 1 == 1, cfg & 2 == 2);
        for (present, at) in [(a, PATCH_MARGIN), (b, far)] {
            if present {
                for r in at..at + PATCH {
                    img[r * size + at..r * size + at + PATCH].fill(255);
                }
            }
        }
        labels.push(u8::from(a != b));
    }
    Ok(Dataset {
        split: format!("longrange-{seed}"),
        h: size,
        w: size,
        c: 1,
        classes: 2,
        images,
        labels,
    })
}
