//! Image datasets on disk: `<root>/<class>/<image>` trees, synthetic export
//! and split files.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use fsl_core::data::{LabeledDataset, Phase, SplitSpec};
use fsl_core::synthetic::{generate_synthetic_dataset, SyntheticConfig};
use fsl_core::Real;
use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DatasetConfig, SourceConfig};
use crate::error::{io_err, HarnessError, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn dataset_err(path: &Path, message: impl Into<String>) -> HarnessError {
    HarnessError::Dataset {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Decodes one image, resizes it bilinearly to `size × size` and appends it
/// to `out` in `[C, H, W]` order scaled to `[0, 1]`.
fn push_image<T: Real>(path: &Path, size: usize, channels: usize, out: &mut Vec<T>) -> Result<()> {
    let img = image::open(path).map_err(|source| HarnessError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let side = u32::try_from(size).map_err(|_| dataset_err(path, "image size too large"))?;
    let img = img.resize_exact(side, side, FilterType::Triangle);
    let plane = size * size;
    let raw = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => {
            return Err(HarnessError::Config(format!(
                "{c} channels requested; only 1 and 3 are supported"
            )))
        }
    };
    let start = out.len();
    out.resize(start + channels * plane, T::zero());
    for (i, px) in raw.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            out[start + c * plane + i] = T::lit(f64::from(v) / 255.0);
        }
    }
    Ok(())
}

/// Loads `root/<class>/<image>`; classes and images are taken in name order.
pub fn load_directory_dataset<T: Real>(root: &Path, size: usize, channels: usize) -> Result<LabeledDataset<T>> {
    if !root.is_dir() {
        return Err(dataset_err(root, "not a directory"));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let images: Vec<PathBuf> = sorted_entries(&class_dir)?
            .into_iter()
            .filter(|p| is_image(p))
            .collect();
        if images.is_empty() {
            return Err(dataset_err(&class_dir, "class directory holds no images"));
        }
        let label = names.len();
        for path in &images {
            push_image(path, size, channels, &mut pixels)?;
            labels.push(label);
        }
        names.push(
            class_dir
                .file_name()
                .expect("entry has a name")
                .to_string_lossy()
                .into_owned(),
        );
    }
    if names.is_empty() {
        return Err(dataset_err(root, "no class subdirectories"));
    }
    Ok(LabeledDataset::new([channels, size, size], pixels, labels, names)?)
}

/// Builds the dataset a config entry describes. Relative directory paths are
/// resolved against `base`.
pub fn load_dataset<T: Real>(cfg: &DatasetConfig, base: &Path) -> Result<LabeledDataset<T>> {
    match &cfg.source {
        SourceConfig::Directory {
            path,
            image_size,
            channels,
        } => load_directory_dataset(&base.join(path), *image_size, *channels),
        synth => {
            let s = synth.synthetic().expect("synthetic source");
            Ok(generate_synthetic_dataset(&s)?)
        }
    }
}

/// Written next to an exported synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    pub params: SourceConfig,
    pub classes: usize,
    pub images: usize,
    /// SHA-256 over every file's relative path and bytes, in write order.
    pub sha256: String,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(ds: &LabeledDataset<f32>, i: usize) -> Vec<u8> {
    let [c, h, w] = ds.image_shape();
    let img = ds.image(i);
    let plane = h * w;
    let mut raw = vec![0u8; c * plane];
    for p in 0..plane {
        for ch in 0..c {
            raw[p * c + ch] = to_u8(f64::from(img[ch * plane + p]));
        }
    }
    let (w, h) = (w as u32, h as u32);
    let dynamic = if c == 1 {
        DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, raw).expect("buffer size"))
    } else {
        DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, raw).expect("buffer size"))
    };
    let mut bytes = Vec::new();
    dynamic
        .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .expect("in-memory PNG encoding");
    bytes
}

/// Renders a synthetic dataset to `out/<class>/<index>.png` plus `manifest.json`.
pub fn export_synthetic(config: &SyntheticConfig, name: &str, out: &Path) -> Result<Manifest> {
    config.validate()?;
    if config.channels != 1 && config.channels != 3 {
        return Err(HarnessError::Config(
            "only 1- or 3-channel datasets can be exported".into(),
        ));
    }
    let ds: LabeledDataset<f32> = generate_synthetic_dataset(config)?;
    let mut hasher = Sha256::new();
    for (class, class_name) in ds.class_names().iter().enumerate() {
        let dir = out.join(class_name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (j, &i) in ds.class_members(class).iter().enumerate() {
            let rel = format!("{class_name}/{j:04}.png");
            let bytes = encode_png(&ds, i);
            hasher.update(rel.as_bytes());
            hasher.update(&bytes);
            let path = out.join(&rel);
            fs::write(&path, &bytes).map_err(io_err(&path))?;
        }
    }
    let manifest = Manifest {
        name: name.to_string(),
        seed: config.seed,
        params: SourceConfig::from_synthetic(config),
        classes: ds.num_classes(),
        images: ds.len(),
        sha256: hex_digest(hasher.finalize().as_slice()),
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Human-readable record of a class split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub dataset: String,
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitFile {
    pub fn new<T: Real>(dataset: &str, ds: &LabeledDataset<T>, split: &SplitSpec, seed: u64) -> Self {
        let names = |phase| {
            split
                .classes(phase)
                .iter()
                .map(|&c| ds.class_names()[c].clone())
                .collect()
        };
        Self {
            dataset: dataset.to_string(),
            seed,
            train: names(Phase::Train),
            val: names(Phase::Val),
            test: names(Phase::Test),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_quantization_clamps() {
        assert_eq!(to_u8(-0.2), 0);
        assert_eq!(to_u8(1.7), 255);
        assert_eq!(to_u8(0.5), 128);
    }

    #[test]
    fn hex_is_lowercase_pairs() {
        assert_eq!(hex_digest(&[0, 171, 255]), "00abff");
    }
}
