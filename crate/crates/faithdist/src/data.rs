//! Dataset handling: IDX ingestion (MNIST distribution format), IDX writing
//! for fixtures and generated corpora, and seeded synthetic generators —
//! 2-D blobs/moons (low-dimensional enough for the exhaustive grid oracle)
//! and a prototype-based image-classification surrogate.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// A labelled classification dataset with inputs in the `[0, 1]` box.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if class_count == 0 {
            return Err(Error::InvalidParameter("class_count must be positive".into()));
        }
        if let Some(first) = inputs.first() {
            let dim = first.len();
            for (i, x) in inputs.iter().enumerate() {
                if x.len() != dim {
                    return Err(Error::ShapeMismatch {
                        op: "Dataset::new",
                        detail: format!("input {i} has {} entries, expected {dim}", x.len()),
                    });
                }
                if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::Validation(format!("input {i} leaves the [0,1] domain")));
                }
            }
        }
        for (i, &y) in labels.iter().enumerate() {
            if y >= class_count {
                return Err(Error::Validation(format!(
                    "label {y} at example {i} exceeds class count {class_count}"
                )));
            }
        }
        Ok(Self { inputs, labels, class_count, split })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Tensor::len)
    }

    /// First `n` examples (or all of them when `n` exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
            split: self.split,
        }
    }
}

fn parse_err(offset: u64, detail: impl Into<String>) -> Error {
    Error::Parse { offset, detail: detail.into() }
}

/// Reads an IDX image/label file pair into a dataset with pixels scaled to
/// `[0, 1]` (byte value / 255) and images flattened row-major.
pub fn ingest_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    class_count: usize,
    split: Split,
) -> Result<Dataset> {
    let mut images = BufReader::new(File::open(images_path.as_ref())?);
    let magic = images.read_u32::<BigEndian>().map_err(|_| parse_err(0, "missing image magic"))?;
    if magic != IMAGES_MAGIC {
        return Err(parse_err(0, format!("bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let count = images.read_u32::<BigEndian>().map_err(|_| parse_err(4, "missing image count"))? as usize;
    let rows = images.read_u32::<BigEndian>().map_err(|_| parse_err(8, "missing row count"))? as usize;
    let cols = images.read_u32::<BigEndian>().map_err(|_| parse_err(12, "missing column count"))? as usize;
    let pixels = rows * cols;
    let mut inputs = Vec::with_capacity(count);
    let mut buf = vec![0u8; pixels];
    for i in 0..count {
        images
            .read_exact(&mut buf)
            .map_err(|_| parse_err(16 + (i * pixels) as u64, format!("truncated payload at image {i}")))?;
        inputs.push(Tensor::from_raw(
            vec![pixels],
            buf.iter().map(|&b| f64::from(b) / 255.0).collect(),
        ));
    }

    let mut labels_file = BufReader::new(File::open(labels_path.as_ref())?);
    let magic = labels_file.read_u32::<BigEndian>().map_err(|_| parse_err(0, "missing label magic"))?;
    if magic != LABELS_MAGIC {
        return Err(parse_err(0, format!("bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let label_count =
        labels_file.read_u32::<BigEndian>().map_err(|_| parse_err(4, "missing label count"))? as usize;
    if label_count != count {
        return Err(parse_err(4, format!("{count} images but {label_count} labels")));
    }
    let mut raw = vec![0u8; label_count];
    labels_file
        .read_exact(&mut raw)
        .map_err(|_| parse_err(8, "truncated label payload"))?;
    let labels = raw.into_iter().map(usize::from).collect();

    Dataset::new(inputs, labels, class_count, split)
}

/// Writes an IDX image/label file pair; inverse of [`ingest_idx`] for inputs
/// that are exact multiples of 1/255.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    images: &[Vec<u8>],
    labels: &[u8],
) -> Result<()> {
    if images.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut out = BufWriter::new(File::create(images_path.as_ref())?);
    out.write_u32::<BigEndian>(IMAGES_MAGIC)?;
    out.write_u32::<BigEndian>(images.len() as u32)?;
    out.write_u32::<BigEndian>(rows as u32)?;
    out.write_u32::<BigEndian>(cols as u32)?;
    for (i, image) in images.iter().enumerate() {
        if image.len() != rows * cols {
            return Err(Error::Validation(format!(
                "image {i} has {} pixels, expected {}",
                image.len(),
                rows * cols
            )));
        }
        out.write_all(image)?;
    }
    out.flush()?;
    let mut out = BufWriter::new(File::create(labels_path.as_ref())?);
    out.write_u32::<BigEndian>(LABELS_MAGIC)?;
    out.write_u32::<BigEndian>(labels.len() as u32)?;
    out.write_all(labels)?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Generator2d {
    #[default]
    Blobs,
    Moons,
}

/// Seeded 2-class generator on the `[0, 1]^2` box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Synthetic2dSpec {
    pub generator: Generator2d,
    pub train_count: usize,
    pub test_count: usize,
    pub noise: f64,
}

impl Default for Synthetic2dSpec {
    fn default() -> Self {
        Self { generator: Generator2d::Blobs, train_count: 1000, test_count: 200, noise: 0.06 }
    }
}

fn sample_2d(generator: Generator2d, label: usize, noise: f64, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let (mut x, mut y) = match generator {
        Generator2d::Blobs => {
            let c = if label == 0 { 0.3 } else { 0.7 };
            (c + noise * gaussian(rng), c + noise * gaussian(rng))
        }
        Generator2d::Moons => {
            // Two interleaved half-circles, scaled into the unit box.
            let t = rng.gen_range(0.0..std::f64::consts::PI);
            let (mx, my) = if label == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            (
                0.5 + 0.3 * mx - 0.15 + noise * gaussian(rng),
                0.5 + 0.3 * my - 0.05 + noise * gaussian(rng),
            )
        }
    };
    x = x.clamp(0.0, 1.0);
    y = y.clamp(0.0, 1.0);
    [x, y]
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Deterministic two-class 2-D dataset; labels alternate so every split has
/// exactly balanced class proportions (up to one example when the count is
/// odd).
pub fn generate_synthetic2d(spec: &Synthetic2dSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.train_count == 0 || spec.test_count == 0 {
        return Err(Error::Usage("synthetic2d requires nonzero train and test counts".into()));
    }
    if spec.noise < 0.0 || !spec.noise.is_finite() {
        return Err(Error::InvalidParameter(format!("noise must be finite and nonnegative, got {}", spec.noise)));
    }
    let make = |count: usize, split: Split, stream: u64| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(stream));
        let mut inputs = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % 2;
            let p = sample_2d(spec.generator, label, spec.noise, &mut rng);
            inputs.push(Tensor::from_raw(vec![2], p.to_vec()));
            labels.push(label);
        }
        Dataset::new(inputs, labels, 2, split)
    };
    Ok((make(spec.train_count, Split::Train, 0)?, make(spec.test_count, Split::Test, 1)?))
}

/// Prototype-based synthetic image classification corpus: each class has a
/// random binary prototype in `[0,1]^dim` and examples are the prototype plus
/// uniform pixel noise. Serves as a stand-in corpus in environments without
/// the real IDX files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticImageSpec {
    pub input_dim: usize,
    pub class_count: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub noise: f64,
}

impl Default for SyntheticImageSpec {
    fn default() -> Self {
        Self { input_dim: 784, class_count: 10, train_count: 6000, test_count: 1000, noise: 0.1 }
    }
}

pub fn generate_synthetic_images(spec: &SyntheticImageSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.train_count == 0 || spec.test_count == 0 {
        return Err(Error::Usage("synthetic images require nonzero train and test counts".into()));
    }
    if spec.class_count < 2 || spec.input_dim == 0 {
        return Err(Error::InvalidParameter("need at least 2 classes and a positive input dimension".into()));
    }
    if !(0.0..=0.2).contains(&spec.noise) {
        return Err(Error::InvalidParameter(format!("pixel noise must lie in [0, 0.2], got {}", spec.noise)));
    }
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| {
            (0..spec.input_dim)
                // Sparse strokes: most pixels dark, a minority bright, so the
                // corpus has image-like input statistics.
                .map(|_| if proto_rng.gen_bool(0.15) { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let make = |count: usize, split: Split, stream: u64| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed).wrapping_add(stream));
        let mut inputs = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % spec.class_count;
            let pixels: Vec<f64> = prototypes[label]
                .iter()
                .map(|&p| (p + rng.gen_range(-spec.noise..=spec.noise)).clamp(0.0, 1.0))
                .collect();
            inputs.push(Tensor::from_raw(vec![spec.input_dim], pixels));
            labels.push(label);
        }
        Dataset::new(inputs, labels, spec.class_count, split)
    };
    Ok((make(spec.train_count, Split::Train, 0)?, make(spec.test_count, Split::Test, 1)?))
}
