//! Image datasets: the CIFAR-10 binary format and a synthetic stand-in.

use std::f64::consts::PI;
use std::path::Path;

use crate::config::{DatasetKind, SearchConfig};
use crate::error::{DassError, Result};
use crate::rng::RunRng;
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Images stored NCHW, flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gathers the samples at `idx` into a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let x = Tensor::new(vec![idx.len(), self.channels, self.height, self.width], data).expect("batch shape");
        (x, idx.iter().map(|&i| self.labels[i] as usize).collect())
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ..*self
        }
    }

    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.images.truncate(n * self.sample_len());
            self.labels.truncate(n);
        }
    }

    /// Little-endian bytes of the images followed by the labels, for identity checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.images.iter().flat_map(|v| v.to_le_bytes()).collect();
        out.extend_from_slice(&self.labels);
        out
    }
}

/// Decodes CIFAR-10 binary records: one label byte, then 1024 red, 1024
/// green and 1024 blue bytes. Pixels are scaled to `[0, 1]` and standardized.
pub fn parse_cifar_records(bytes: &[u8], source: &str) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DassError::Format {
            offset: (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
            reason: format!(
                "{source}: size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(DassError::Format {
                offset: (r * CIFAR_RECORD) as u64,
                reason: format!("{source}: label byte {} is not a class in 0..=9", rec[0]),
            });
        }
        labels.push(rec[0]);
        for c in 0..3 {
            for &p in &rec[1 + c * 1024..1 + (c + 1) * 1024] {
                images.push((p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]);
            }
        }
    }
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        height: 32,
        width: 32,
    })
}

fn read_cifar_file(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| DassError::io(path, e))?;
    parse_cifar_records(&bytes, &path.display().to_string())
}

fn concat(parts: Vec<Dataset>) -> Option<Dataset> {
    let mut it = parts.into_iter();
    let mut out = it.next()?;
    for d in it {
        out.images.extend(d.images);
        out.labels.extend(d.labels);
    }
    Some(out)
}

/// Loads `data_batch_{1..5}.bin` (those present) and `test_batch.bin`.
/// The training pool is shuffled by `seed` and cut at `split`; every split
/// is then capped at `subset_size`.
pub fn load_cifar10(dir: &Path, subset_size: Option<usize>, split: f64, seed: u64) -> Result<DataSplit> {
    let mut parts = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if p.exists() {
            parts.push(read_cifar_file(&p)?);
        }
    }
    let pool = concat(parts).ok_or_else(|| {
        DassError::config("data_dir", format!("no data_batch_*.bin files in {}", dir.display()))
    })?;
    let test_path = dir.join("test_batch.bin");
    if !test_path.exists() {
        return Err(DassError::config("data_dir", format!("missing {}", test_path.display())));
    }
    let mut test = read_cifar_file(&test_path)?;
    let (mut train, mut val) = split_pool(&pool, split, seed);
    if let Some(cap) = subset_size {
        train.truncate(cap);
        val.truncate(cap);
        test.truncate(cap);
    }
    Ok(DataSplit { train, val, test })
}

/// Shuffles the pool by `seed` and cuts it at `round(len * split)`.
pub fn split_pool(pool: &Dataset, split: f64, seed: u64) -> (Dataset, Dataset) {
    let order = RunRng::new(seed).permutation(pool.len());
    let cut = ((pool.len() as f64) * split).round() as usize;
    (pool.select(&order[..cut]), pool.select(&order[cut..]))
}

/// Class `c`'s mean image: a colored sinusoidal grating whose orientation,
/// frequency and color depend on the class. Independent of any seed.
pub fn class_pattern(class: usize, classes: usize, image_size: usize, amplitude: f64) -> Vec<f32> {
    let angle = PI * class as f64 / classes as f64;
    let freq = 1.0 + (class % 2) as f64;
    let phase = 2.0 * PI * class as f64 / classes as f64;
    let color = [
        (phase).cos(),
        (phase + 2.0 * PI / 3.0).cos(),
        (phase + 4.0 * PI / 3.0).cos(),
    ];
    let s = image_size as f64;
    let mut out = Vec::with_capacity(3 * image_size * image_size);
    for col in color {
        for y in 0..image_size {
            for x in 0..image_size {
                let u = (x as f64 * angle.cos() + y as f64 * angle.sin()) / s;
                let g = (2.0 * PI * freq * u + phase).cos();
                out.push((amplitude * (0.5 * g + 0.5 * col * g.abs())) as f32);
            }
        }
    }
    out
}

/// Balanced class-conditional images: class pattern plus Gaussian noise of
/// std `noise`. Labels cycle through the classes and are then shuffled.
pub fn gen_synthetic(
    n: usize,
    classes: usize,
    image_size: usize,
    seed: u64,
    amplitude: f64,
    noise: f64,
) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(DassError::Invalid(format!("need n >= classes > 0, got n={n}, classes={classes}")));
    }
    let mut rng = RunRng::new(seed);
    let patterns: Vec<Vec<f32>> = (0..classes)
        .map(|c| class_pattern(c, classes, image_size, amplitude))
        .collect();
    let order = rng.permutation(n);
    let labels: Vec<u8> = order.iter().map(|&i| (i % classes) as u8).collect();
    let mut images = Vec::with_capacity(n * patterns[0].len());
    for &l in &labels {
        for &p in &patterns[l as usize] {
            let eps = if noise > 0.0 { rng.normal(0.0, noise as f32) } else { 0.0 };
            images.push(p + eps);
        }
    }
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        height: image_size,
        width: image_size,
    })
}

/// Builds the splits a config asks for.
pub fn load_for_config(cfg: &SearchConfig) -> Result<DataSplit> {
    match cfg.dataset {
        DatasetKind::Synthetic => {
            let gen = |k: u64| {
                gen_synthetic(
                    cfg.synthetic_per_split,
                    cfg.num_classes,
                    cfg.image_size,
                    cfg.data_seed.wrapping_mul(3).wrapping_add(k),
                    cfg.synthetic_signal,
                    cfg.synthetic_noise,
                )
            };
            Ok(DataSplit {
                train: gen(0)?,
                val: gen(1)?,
                test: gen(2)?,
            })
        }
        DatasetKind::Cifar10Subset => {
            let dir = cfg.resolved_data_dir().ok_or_else(|| {
                DassError::config("data_dir", format!("unset, and {} is not set", crate::config::DATA_DIR_ENV))
            })?;
            load_cifar10(&dir, cfg.subset_size, cfg.train_val_split, cfg.data_seed)
        }
    }
}

/// Random crop (zero padding of `pad`) and horizontal flip, in place on an NCHW batch.
pub fn augment_batch(x: &mut Tensor, pad: usize, rng: &mut RunRng) {
    let [n, c, h, w] = *x.shape() else { return };
    let data = x.data_mut();
    let mut tmp = vec![0.0f32; c * h * w];
    for i in 0..n {
        let dy = rng.below(2 * pad + 1) as isize - pad as isize;
        let dx = rng.below(2 * pad + 1) as isize - pad as isize;
        let flip = rng.below(2) == 1;
        let img = &mut data[i * c * h * w..(i + 1) * c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = if flip { (w - 1 - xx) as isize } else { xx as isize };
                    let sx = sx0 + dx;
                    tmp[(ch * h + y) * w + xx] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        img[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
        img.copy_from_slice(&tmp);
    }
}
