//! Datasets: a seeded procedural "textured shapes" generator as the
//! desk-scale default, plus an IDX-format reader for MNIST-class data.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.inputs[0].shape()
    }
}

/// Train/test pair with a shared sample space.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

const MAX_SHAPE_CLASSES: usize = 8;

/// Seeded 16x16x3-style procedural dataset: each class is a distinct
/// spatial motif (square, circle, cross, triangle, stripes, checker, ring)
/// with randomized color, position jitter, and background noise.
pub fn procedural_split(
    seed: u64,
    classes: usize,
    train: usize,
    test: usize,
    height: usize,
    width: usize,
) -> Result<Split> {
    if classes < 2 || classes > MAX_SHAPE_CLASSES {
        return Err(Error::Dataset(format!("classes must be in 2..={MAX_SHAPE_CLASSES}, got {classes}")));
    }
    if height < 8 || width < 8 {
        return Err(Error::Dataset(format!("image size {height}x{width} too small")));
    }
    let mut train_rng = rng::stream(seed, &[tag::DATASET, 0]);
    let mut test_rng = rng::stream(seed, &[tag::DATASET, 1]);
    Ok(Split {
        train: generate(&mut train_rng, classes, train, height, width),
        test: generate(&mut test_rng, classes, test, height, width),
    })
}

fn generate(rng: &mut ChaCha8Rng, classes: usize, n: usize, h: usize, w: usize) -> Dataset {
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes; // balanced classes
        inputs.push(textured_shape(rng, label, h, w));
        labels.push(label);
    }
    Dataset { inputs, labels, classes }
}

fn textured_shape(rng: &mut ChaCha8Rng, class: usize, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![3, h, w]);
    let color: [f64; 3] = [
        rng.gen_range(0.55..1.0),
        rng.gen_range(0.55..1.0),
        rng.gen_range(0.55..1.0),
    ];
    let cy = h as f64 / 2.0 + rng.gen_range(-1.5..1.5);
    let cx = w as f64 / 2.0 + rng.gen_range(-1.5..1.5);
    let r = (h.min(w) as f64) * rng.gen_range(0.22..0.32);
    let data = t.data_mut();
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let inside = match class {
                0 => dy.abs() <= r && dx.abs() <= r,                      // square
                1 => (dy * dy + dx * dx).sqrt() <= r,                     // circle
                2 => dy.abs() <= r / 3.0 || dx.abs() <= r / 3.0,          // cross
                3 => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,   // triangle
                4 => (y / 2) % 2 == 0,                                    // horizontal stripes
                5 => (x / 2) % 2 == 0,                                    // vertical stripes
                6 => ((y / 2) + (x / 2)) % 2 == 0,                        // checker
                _ => {
                    let d = (dy * dy + dx * dx).sqrt();
                    d <= r && d >= r * 0.55                               // ring
                }
            };
            for (ch, &col) in color.iter().enumerate() {
                let idx = (ch * h + y) * w + x;
                data[idx] = if inside {
                    (col + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0)
                } else {
                    rng.gen_range(0.0..0.25)
                };
            }
        }
    }
    t
}

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Reads an IDX image file (big-endian magic 0x00000803) into `[1, H, W]`
/// tensors scaled to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Vec<Tensor>> {
    let mut f = std::fs::File::open(path)?;
    let magic = read_u32_be(&mut f)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Dataset(format!("bad IDX image magic {magic:#010x}")));
    }
    let n = read_u32_be(&mut f)? as usize;
    let h = read_u32_be(&mut f)? as usize;
    let w = read_u32_be(&mut f)? as usize;
    let mut raw = vec![0u8; n * h * w];
    f.read_exact(&mut raw)?;
    raw.chunks(h * w)
        .map(|px| Tensor::new(vec![1, h, w], px.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect()
}

/// Reads an IDX label file (big-endian magic 0x00000801).
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut f = std::fs::File::open(path)?;
    let magic = read_u32_be(&mut f)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Dataset(format!("bad IDX label magic {magic:#010x}")));
    }
    let n = read_u32_be(&mut f)? as usize;
    let mut raw = vec![0u8; n];
    f.read_exact(&mut raw)?;
    Ok(raw.into_iter().map(|b| b as usize).collect())
}

/// Loads an IDX image/label pair into a dataset.
pub fn read_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let inputs = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if inputs.len() != labels.len() {
        return Err(Error::Dataset(format!(
            "{} images but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    if inputs.is_empty() {
        return Err(Error::Dataset("empty IDX dataset".into()));
    }
    let classes = labels.iter().max().map(|&m| m + 1).unwrap_or(0);
    Ok(Dataset { inputs, labels, classes })
}
