//! Image-folder datasets: `root/<class>/<image>`, one subdirectory per class.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GenericImageView, GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Split};
use crate::tensor::Tensor;

/// Written next to exported class folders.
pub const METADATA_FILE: &str = "dataset.json";

const EXTENSIONS: &[&str] = &["png", "pgm", "ppm", "pnm"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub num_items: usize,
    pub image_shape: [usize; 3],
    pub class_names: Vec<String>,
    /// Free-form description of how the data was produced.
    #[serde(default)]
    pub source: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        out.push(entry.map_err(io_err(dir))?.path());
    }
    out.sort();
    Ok(out)
}

/// Resizes the shorter side to `size`, center-crops to `size`×`size` and
/// scales to [0, 1].
fn to_tensor(img: DynamicImage, channels: usize, size: usize) -> Tensor {
    let (w, h) = img.dimensions();
    let scale = size as f64 / w.min(h) as f64;
    let (nw, nh) = (
        ((w as f64 * scale).round() as u32).max(size as u32),
        ((h as f64 * scale).round() as u32).max(size as u32),
    );
    let resized = if (nw, nh) == (w, h) {
        img
    } else {
        img.resize_exact(nw, nh, FilterType::Triangle)
    };
    let (x0, y0) = ((nw - size as u32) / 2, (nh - size as u32) / 2);
    let cropped = resized.crop_imm(x0, y0, size as u32, size as u32);
    let mut data = vec![0.0; channels * size * size];
    if channels == 1 {
        let g = cropped.to_luma8();
        for (i, p) in g.pixels().enumerate() {
            data[i] = p.0[0] as f64 / 255.0;
        }
    } else {
        let rgb = cropped.to_rgb8();
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * size * size + i] = p.0[c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![channels, size, size], data).expect("image tensor")
}

/// Loads every PNG/PGM/PPM under `root/<class>/`. Classes are the
/// subdirectories in lexicographic order; label `i` is the `i`-th of them.
/// Unreadable files are skipped with a warning; a class left with no images
/// is an error.
pub fn load_image_folder(root: &Path, channels: usize, size: usize) -> Result<Dataset, DataError> {
    if channels != 1 && channels != 3 {
        return Err(DataError::Config(format!(
            "channels must be 1 or 3, got {channels}"
        )));
    }
    if size == 0 {
        return Err(DataError::Config("image size must be positive".into()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(DataError::Invalid(format!(
            "{} has no class subdirectories",
            root.display()
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        names.push(
            dir.file_name()
                .expect("class dir name")
                .to_string_lossy()
                .into_owned(),
        );
        let mut count = 0;
        for file in sorted_entries(dir)? {
            let ext = file
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            if !file.is_file() || !EXTENSIONS.contains(&ext.as_str()) {
                continue;
            }
            match image::open(&file) {
                Ok(img) => {
                    data.extend_from_slice(to_tensor(img, channels, size).data());
                    labels.push(label);
                    count += 1;
                }
                Err(e) => log::warn!("skipping unreadable image {}: {e}", file.display()),
            }
        }
        if count == 0 {
            return Err(DataError::EmptyClass(dir.clone()));
        }
    }
    let images =
        Tensor::new(vec![labels.len(), channels, size, size], data).expect("dataset shape");
    Dataset::new(images, labels, Split::Full, names)
}

/// Writes `root/<class>/<index>.pgm` (one channel) or `.ppm` (three) plus
/// [`METADATA_FILE`]. Pixel values are quantized to 8 bits.
pub fn export_image_folder(
    dataset: &Dataset,
    root: &Path,
    source: serde_json::Value,
) -> Result<(), DataError> {
    let [c, h, w] = dataset.image_shape();
    if c != 1 && c != 3 {
        return Err(DataError::Config(format!(
            "cannot export {c}-channel images"
        )));
    }
    fs::create_dir_all(root).map_err(io_err(root))?;
    for name in dataset.class_names() {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for i in 0..dataset.len() {
        let px = dataset.images().item_slice(i);
        let dir = root.join(&dataset.class_names()[dataset.labels()[i]]);
        let (img, path) = if c == 1 {
            let g = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([quantize(px[y as usize * w + x as usize])])
            });
            (DynamicImage::ImageLuma8(g), dir.join(format!("{i:05}.pgm")))
        } else {
            let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let o = y as usize * w + x as usize;
                image::Rgb([
                    quantize(px[o]),
                    quantize(px[h * w + o]),
                    quantize(px[2 * h * w + o]),
                ])
            });
            (
                DynamicImage::ImageRgb8(rgb),
                dir.join(format!("{i:05}.ppm")),
            )
        };
        img.save_with_format(&path, ImageFormat::Pnm)
            .map_err(|e| DataError::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
    }
    let meta = DatasetMetadata {
        num_items: dataset.len(),
        image_shape: [c, h, w],
        class_names: dataset.class_names().to_vec(),
        source,
    };
    let path = root.join(METADATA_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}
