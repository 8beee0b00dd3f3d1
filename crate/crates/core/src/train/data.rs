//! Synthetic class-colored blob images stored as ETF files plus a JSON manifest.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::etf::{self, Dtype};
use crate::tensor::{Dims, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub etf_path: String,
    pub label: usize,
}

/// RGB tint of each class; classes beyond the palette reuse it with inverted channels.
const PALETTE: [[f64; 3]; 4] = [[1.0, -0.6, -0.6], [-0.6, 1.0, -0.6], [-0.6, -0.6, 1.0], [1.0, 1.0, -0.6]];

fn class_color(class: usize) -> [f64; 3] {
    let c = PALETTE[class % PALETTE.len()];
    if (class / PALETTE.len()) % 2 == 1 {
        c.map(|v| -v)
    } else {
        c
    }
}

/// One (3, size, size) image: noisy background with a Gaussian blob of the class color.
pub fn blob_image<R: Rng>(class: usize, size: usize, rng: &mut R) -> Tensor {
    let color = class_color(class);
    let s = size as f64;
    let (cy, cx) = (rng.gen_range(0.25..0.75) * s, rng.gen_range(0.25..0.75) * s);
    let radius = rng.gen_range(0.12..0.25) * s;
    let mut t = Tensor::zeros([1, 3, size, size]);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let r2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (radius * radius);
                let v = color[c] * (-0.5 * r2).exp() + rng.gen_range(-0.2..0.2);
                let i = t.index(0, c, y, x);
                t.data_mut()[i] = v;
            }
        }
    }
    t
}

/// Writes `samples` images cycling through `classes` labels into `dir`.
pub fn generate_blobs(dir: &Path, samples: usize, classes: usize, size: usize, seed: u64) -> Result<()> {
    if classes == 0 || samples == 0 || size == 0 {
        return Err(config_err!("dataset needs samples, classes and size all positive"));
    }
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % classes;
        let name = format!("sample_{i:05}.etf");
        etf::save(dir.join(&name), &blob_image(label, size, &mut rng), Dtype::F32)?;
        manifest.push(ManifestEntry { etf_path: name, label });
    }
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Samples with labels, all of one (3, h, w) shape.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub root: PathBuf,
    pub samples: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl DatasetHandle {
    /// Loads a directory written by `generate_blobs` or any manifest of the same form.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
        if entries.is_empty() {
            return Err(config_err!("dataset manifest in {} is empty", dir.display()));
        }
        let classes = entries.iter().map(|e| e.label).max().unwrap_or(0) + 1;
        let mut samples = Vec::with_capacity(entries.len());
        let mut shape: Option<Dims> = None;
        for e in &entries {
            let t = etf::load(dir.join(&e.etf_path))?;
            let d = t.dims();
            if d.n != 1 || d.c != 3 {
                return Err(shape_err!("{}: expected one 3-channel image, got {d}", e.etf_path));
            }
            match shape {
                Some(s) if s != d => return Err(shape_err!("{}: {d} differs from {s}", e.etf_path)),
                _ => shape = Some(d),
            }
            samples.push(t);
        }
        Ok(DatasetHandle { root: dir.to_path_buf(), samples, labels: entries.iter().map(|e| e.label).collect(), classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_dims(&self) -> Dims {
        self.samples[0].dims()
    }

    /// Stacks the samples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let parts: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i]).collect();
        Ok((Tensor::stack_batch(&parts)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}
