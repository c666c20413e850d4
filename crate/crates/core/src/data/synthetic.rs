//! Deterministic synthetic glyph datasets.
//!
//! `Bars` glyphs are stacks of horizontal strokes with random extents: they
//! have a clear upright orientation, and a quarter turn moves them off the
//! manifold of upright glyphs. With `orientation_classes`, each listed
//! orientation of a base glyph is its own class, so rotation changes the
//! label the way turning a 6 gives a 9. `Blobs` glyphs are radially
//! symmetric ring profiles whose class does not depend on orientation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Split};
use crate::tensor::Tensor;
use crate::transforms::rotate90;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlyphStyle {
    /// Rotation-asymmetric horizontal stroke glyphs.
    Bars,
    /// Rotation-invariant ring profiles.
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlyphConfig {
    pub style: GlyphStyle,
    pub num_base_shapes: usize,
    /// Make every orientation in `class_orientations` of a base glyph a
    /// separate class.
    pub orientation_classes: bool,
    /// Quarter turns that become classes when `orientation_classes` is set.
    pub class_orientations: Vec<u8>,
    pub samples_per_class: usize,
    pub image_size: usize,
    /// Maximum random translation, in pixels, along each axis.
    pub translate_px: usize,
    /// Maximum per-instance shift of each stroke end, in pixels.
    pub deform_px: usize,
    /// Standard deviation of additive pixel noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        Self {
            style: GlyphStyle::Bars,
            num_base_shapes: 3,
            orientation_classes: true,
            class_orientations: vec![0, 1, 2, 3],
            samples_per_class: 50,
            image_size: 32,
            translate_px: 2,
            deform_px: 1,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

const MIN_IMAGE_SIZE: usize = 16;
const ROW_SLOTS: usize = 5;
const COL_UNITS: usize = 10;

impl GlyphConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Config(m));
        if self.image_size < MIN_IMAGE_SIZE {
            return err(format!(
                "image_size {} is too small for a glyph (minimum {MIN_IMAGE_SIZE})",
                self.image_size
            ));
        }
        if self.num_base_shapes == 0 || self.samples_per_class == 0 {
            return err("num_base_shapes and samples_per_class must be positive".into());
        }
        if self.orientation_classes {
            if self.style == GlyphStyle::Blobs {
                return err("blob glyphs look the same in every orientation; orientation_classes needs bars".into());
            }
            let o = &self.class_orientations;
            if o.is_empty() || o.iter().any(|&r| r > 3) {
                return err(format!(
                    "class_orientations {o:?} must be a non-empty subset of 0..=3"
                ));
            }
            if (1..o.len()).any(|i| o[..i].contains(&o[i])) {
                return err(format!("class_orientations {o:?} has duplicates"));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return err(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        if self.translate_px * 4 > self.image_size {
            return err(format!(
                "translate_px {} is too large for the image",
                self.translate_px
            ));
        }
        Ok(())
    }

    fn orientations(&self) -> Vec<u8> {
        if self.orientation_classes {
            self.class_orientations.clone()
        } else {
            vec![0]
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_base_shapes * self.orientations().len()
    }

    fn glyph_box(&self) -> usize {
        (self.image_size * 5 / 8).max(COL_UNITS)
    }
}

/// One stroke: a slot row and a half-open column range, in units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Bar {
    row: usize,
    start: usize,
    end: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Bars(Vec<Bar>),
    /// Ring radii and width as fractions of half the glyph box.
    Rings {
        radii: Vec<f64>,
        width: f64,
    },
}

fn random_shape(style: GlyphStyle, rng: &mut ChaCha8Rng) -> Shape {
    match style {
        GlyphStyle::Bars => {
            let count = rng.gen_range(3..=4);
            let rows = rand::seq::index::sample(rng, ROW_SLOTS, count).into_vec();
            let mut bars: Vec<Bar> = rows
                .into_iter()
                .map(|row| {
                    let len = rng.gen_range(3..=COL_UNITS);
                    let start = rng.gen_range(0..=COL_UNITS - len);
                    Bar {
                        row,
                        start,
                        end: start + len,
                    }
                })
                .collect();
            bars.sort_by_key(|b| b.row);
            Shape::Bars(bars)
        }
        GlyphStyle::Blobs => {
            let count = rng.gen_range(1..=2);
            let mut radii: Vec<f64> = (0..count).map(|_| rng.gen_range(0.0..0.9)).collect();
            radii.sort_by(f64::total_cmp);
            Shape::Rings {
                radii,
                width: rng.gen_range(0.08..0.25),
            }
        }
    }
}

/// Draws `shape` into an S×S image, upright and centered. `shift` moves each
/// stroke end by whole pixels (ignored by rings).
fn render(shape: &Shape, size: usize, glyph_box: usize, shift: &[(isize, isize)]) -> Vec<f64> {
    let mut img = vec![0.0; size * size];
    let origin = (size - glyph_box) / 2;
    match shape {
        Shape::Bars(bars) => {
            let pitch = glyph_box / ROW_SLOTS;
            let thick = (pitch / 2).max(1);
            let unit = glyph_box as f64 / COL_UNITS as f64;
            for (k, bar) in bars.iter().enumerate() {
                let (ds, de) = shift.get(k).copied().unwrap_or((0, 0));
                let x0 = origin as isize + (bar.start as f64 * unit).round() as isize + ds;
                let x1 = origin as isize + (bar.end as f64 * unit).round() as isize + de;
                let y0 = origin + bar.row * pitch + (pitch - thick) / 2;
                for y in y0..y0 + thick {
                    for x in x0.max(0)..x1.min(size as isize) {
                        img[y * size + x as usize] = 1.0;
                    }
                }
            }
        }
        Shape::Rings { radii, width } => {
            let c = (size as f64 - 1.0) / 2.0;
            let half = glyph_box as f64 / 2.0;
            for y in 0..size {
                for x in 0..size {
                    let (dy, dx) = (y as f64 - c, x as f64 - c);
                    let r = (dx * dx + dy * dy).sqrt() / half;
                    let v: f64 = radii
                        .iter()
                        .map(|&r0| (-(r - r0) * (r - r0) / (2.0 * width * width)).exp())
                        .sum();
                    img[y * size + x] = v.min(1.0);
                }
            }
        }
    }
    img
}

fn distinct_shapes(cfg: &GlyphConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Shape>, DataError> {
    let size = cfg.image_size;
    let gbox = cfg.glyph_box();
    let orientations = cfg.orientations();
    let mut shapes: Vec<Shape> = Vec::new();
    let mut seen: Vec<Tensor> = Vec::new();
    let mut attempts = 0;
    while shapes.len() < cfg.num_base_shapes {
        attempts += 1;
        if attempts > 10_000 {
            return Err(DataError::Config(format!(
                "could not find {} distinct glyphs",
                cfg.num_base_shapes
            )));
        }
        let shape = random_shape(cfg.style, rng);
        let base =
            Tensor::new(vec![1, size, size], render(&shape, size, gbox, &[])).expect("glyph");
        // every class image, and every quarter turn of it, must be new
        let views: Vec<Tensor> = (0..4).map(|r| rotate90(&base, r)).collect();
        let class_views: Vec<&Tensor> = orientations.iter().map(|&o| &views[o as usize]).collect();
        let self_clash = (1..class_views.len()).any(|i| class_views[..i].contains(&class_views[i]));
        if self_clash || views.iter().any(|v| seen.contains(v)) {
            continue;
        }
        seen.push(base);
        shapes.push(shape);
    }
    Ok(shapes)
}

fn class_name(cfg: &GlyphConfig, shape: usize, rotation: u8) -> String {
    match (cfg.style, cfg.orientation_classes) {
        (GlyphStyle::Bars, true) => format!("glyph{shape:03}_rot{:03}", 90 * rotation as usize),
        (GlyphStyle::Bars, false) => format!("glyph{shape:03}"),
        (GlyphStyle::Blobs, _) => format!("blob{shape:03}"),
    }
}

/// The jitter-free image of class (`shape`, `rotation`).
pub fn canonical_glyph(cfg: &GlyphConfig, shape: usize, rotation: u8) -> Result<Tensor, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shapes = distinct_shapes(cfg, &mut rng)?;
    let s = shapes
        .get(shape)
        .ok_or_else(|| DataError::Config(format!("no base shape {shape}")))?;
    let n = cfg.image_size;
    let base = Tensor::new(vec![1, n, n], render(s, n, cfg.glyph_box(), &[])).expect("glyph");
    Ok(rotate90(&base, rotation))
}

fn translate(img: &[f64], size: usize, dy: isize, dx: isize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for y in 0..size as isize {
        let sy = y - dy;
        if sy < 0 || sy >= size as isize {
            continue;
        }
        for x in 0..size as isize {
            let sx = x - dx;
            if sx < 0 || sx >= size as isize {
                continue;
            }
            out[(y as usize) * size + x as usize] = img[sy as usize * size + sx as usize];
        }
    }
    out
}

/// Generates a single-channel dataset; a pure function of `cfg`.
///
/// Class ids run over base shapes, then over orientations:
/// `id = shape * |orientations| + orientation_index`.
pub fn generate_synthetic(cfg: &GlyphConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shapes = distinct_shapes(cfg, &mut rng)?;
    let orientations = cfg.orientations();
    let size = cfg.image_size;
    let gbox = cfg.glyph_box();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let t = cfg.translate_px as isize;
    let d = cfg.deform_px as isize;

    let mut data = Vec::with_capacity(cfg.num_classes() * cfg.samples_per_class * size * size);
    let mut labels = Vec::new();
    let mut names = Vec::new();
    for (si, shape) in shapes.iter().enumerate() {
        for (oi, &rot) in orientations.iter().enumerate() {
            let label = si * orientations.len() + oi;
            names.push(class_name(cfg, si, rot));
            for _ in 0..cfg.samples_per_class {
                let shift: Vec<(isize, isize)> = (0..ROW_SLOTS)
                    .map(|_| (rng.gen_range(-d..=d), rng.gen_range(-d..=d)))
                    .collect();
                let upright = render(shape, size, gbox, &shift);
                let img = Tensor::new(vec![1, size, size], upright).expect("glyph");
                let rotated = rotate90(&img, rot);
                let (dy, dx) = (rng.gen_range(-t..=t), rng.gen_range(-t..=t));
                let mut pixels = translate(rotated.data(), size, dy, dx);
                if cfg.noise_sigma > 0.0 {
                    for p in &mut pixels {
                        *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    }
                }
                data.extend_from_slice(&pixels);
                labels.push(label);
            }
        }
    }
    let images = Tensor::new(vec![labels.len(), 1, size, size], data).expect("dataset shape");
    Dataset::new(images, labels, Split::Full, names)
}
