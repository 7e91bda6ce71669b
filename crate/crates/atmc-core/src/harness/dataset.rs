//! Dataset loading: bit-exact IDX parsing for MNIST, and a deterministic
//! synthetic Gaussian-blob generator used by fast tests.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{AtmcError, Result};
use crate::tensor::{Element, Tensor};
use crate::trainer::TrainData;

pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// Train/test images in [0,1] with labels. Train and test are generated or
/// loaded from disjoint sources by construction.
#[derive(Debug, Clone)]
pub struct Dataset<E> {
    pub name: String,
    pub train_x: Tensor<E>,
    pub train_y: Vec<usize>,
    pub test_x: Tensor<E>,
    pub test_y: Vec<usize>,
    pub classes: usize,
}

impl<E: Element> Dataset<E> {
    pub fn train_view(&self) -> TrainData<'_, E> {
        TrainData {
            x: &self.train_x,
            y: &self.train_y,
        }
    }

    pub fn test_view(&self) -> TrainData<'_, E> {
        TrainData {
            x: &self.test_x,
            y: &self.test_y,
        }
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    if bytes.len() < offset + 4 {
        return Err(AtmcError::IdxTruncated {
            path: path.to_string(),
            offset: bytes.len(),
            needed: offset + 4 - bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse an IDX image file: big-endian magic 0x00000803, then counts, then
/// unsigned bytes scaled so byte 255 becomes exactly 1.0.
pub fn parse_idx_images<E: Element>(bytes: &[u8], path: &str) -> Result<(usize, usize, usize, Tensor<E>)> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(AtmcError::IdxBadMagic {
            path: path.to_string(),
            offset: 0,
            expected: IDX_MAGIC_IMAGES,
            found: magic,
        });
    }
    let n = read_be_u32(bytes, 4, path)? as usize;
    let h = read_be_u32(bytes, 8, path)? as usize;
    let w = read_be_u32(bytes, 12, path)? as usize;
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return Err(AtmcError::IdxTruncated {
            path: path.to_string(),
            offset: bytes.len(),
            needed: need - bytes.len(),
        });
    }
    let scale = 1.0 / 255.0;
    let data: Vec<E> = bytes[16..need]
        .iter()
        .map(|&b| E::from_f64(b as f64 * scale))
        .collect();
    Ok((n, h, w, Tensor::new(vec![n, 1, h, w], data)?))
}

/// Parse an IDX label file: big-endian magic 0x00000801, count, raw bytes.
pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != IDX_MAGIC_LABELS {
        return Err(AtmcError::IdxBadMagic {
            path: path.to_string(),
            offset: 0,
            expected: IDX_MAGIC_LABELS,
            found: magic,
        });
    }
    let n = read_be_u32(bytes, 4, path)? as usize;
    let need = 8 + n;
    if bytes.len() < need {
        return Err(AtmcError::IdxTruncated {
            path: path.to_string(),
            offset: bytes.len(),
            needed: need - bytes.len(),
        });
    }
    Ok(bytes[8..need].iter().map(|&b| b as usize).collect())
}

/// Load the four standard MNIST IDX files from `dir`.
pub fn load_mnist<E: Element>(dir: &Path) -> Result<Dataset<E>> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let p = dir.join(name);
        std::fs::read(&p).map_err(AtmcError::Io)
    };
    let (n_train, _, _, train_x) = parse_idx_images::<E>(
        &read("train-images-idx3-ubyte")?,
        "train-images-idx3-ubyte",
    )?;
    let train_y = parse_idx_labels(
        &read("train-labels-idx1-ubyte")?,
        "train-labels-idx1-ubyte",
    )?;
    if n_train != train_y.len() {
        return Err(AtmcError::IdxCountMismatch {
            images: n_train,
            labels: train_y.len(),
        });
    }
    let (n_test, _, _, test_x) =
        parse_idx_images::<E>(&read("t10k-images-idx3-ubyte")?, "t10k-images-idx3-ubyte")?;
    let test_y = parse_idx_labels(&read("t10k-labels-idx1-ubyte")?, "t10k-labels-idx1-ubyte")?;
    if n_test != test_y.len() {
        return Err(AtmcError::IdxCountMismatch {
            images: n_test,
            labels: test_y.len(),
        });
    }
    for &y in train_y.iter().chain(test_y.iter()) {
        if y > 9 {
            return Err(AtmcError::LabelOutOfRange { label: y, classes: 10 });
        }
    }
    Ok(Dataset {
        name: "mnist".to_string(),
        train_x,
        train_y,
        test_x,
        test_y,
        classes: 10,
    })
}

/// Shape of a synthetic Gaussian-blob classification set.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub classes: usize,
    pub side: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Std-dev of the additive pixel noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            side: 8,
            train_per_class: 100,
            test_per_class: 25,
            noise: 0.06,
        }
    }
}

impl SynthSpec {
    pub fn small() -> Self {
        Self::default()
    }

    pub fn image28(classes: usize, train_per_class: usize, test_per_class: usize) -> Self {
        SynthSpec {
            classes,
            side: 28,
            train_per_class,
            test_per_class,
            noise: 0.06,
        }
    }
}

/// Deterministic Gaussian-blob classes: each class gets a bump at a distinct
/// golden-angle position (plus a seeded secondary bump), samples add i.i.d.
/// pixel noise and clamp to [0,1]. Train and test are separate draws.
pub fn synth_dataset<E: Element>(spec: &SynthSpec, seed: u64) -> Dataset<E> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let side = spec.side;
    let d = side * side;

    // Class means: primary bump on a ring so classes never coincide.
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    for c in 0..spec.classes {
        let angle = c as f64 * 2.399963229728653;
        let r = side as f64 * 0.27;
        let cx = side as f64 / 2.0 + r * angle.cos();
        let cy = side as f64 / 2.0 + r * angle.sin();
        let sigma = side as f64 * (0.10 + 0.05 * rng.random::<f64>());
        let amp = 0.7 + 0.3 * rng.random::<f64>();
        // Secondary bump, seeded per class.
        let cx2 = 1.0 + (side as f64 - 2.0) * rng.random::<f64>();
        let cy2 = 1.0 + (side as f64 - 2.0) * rng.random::<f64>();
        let amp2 = 0.25 * rng.random::<f64>();
        let mut mean = vec![0.0f64; d];
        for yi in 0..side {
            for xi in 0..side {
                let g1 = (-((xi as f64 - cx).powi(2) + (yi as f64 - cy).powi(2))
                    / (2.0 * sigma * sigma))
                    .exp();
                let g2 = (-((xi as f64 - cx2).powi(2) + (yi as f64 - cy2).powi(2))
                    / (2.0 * sigma * sigma))
                    .exp();
                mean[yi * side + xi] = amp * g1 + amp2 * g2;
            }
        }
        let mx = mean.iter().cloned().fold(0.0f64, f64::max).max(1e-9);
        for v in mean.iter_mut() {
            *v = *v / mx * 0.85;
        }
        means.push(mean);
    }

    let draw = |per_class: usize, rng: &mut ChaCha20Rng| {
        let n = per_class * spec.classes;
        let mut x = Tensor::zeros(&[n, 1, side, side]);
        let mut y = Vec::with_capacity(n);
        let mut row = 0;
        for c in 0..spec.classes {
            for _ in 0..per_class {
                let dst = &mut x.data_mut()[row * d..(row + 1) * d];
                for (o, &m) in dst.iter_mut().zip(means[c].iter()) {
                    let eps: f64 = rng.sample(StandardNormal);
                    *o = E::from_f64((m + spec.noise * eps).clamp(0.0, 1.0));
                }
                y.push(c);
                row += 1;
            }
        }
        (x, y)
    };

    let (train_x, train_y) = draw(spec.train_per_class, &mut rng);
    let (test_x, test_y) = draw(spec.test_per_class, &mut rng);
    Dataset {
        name: format!("synth{}x{}", side, side),
        train_x,
        train_y,
        test_x,
        test_y,
        classes: spec.classes,
    }
}
